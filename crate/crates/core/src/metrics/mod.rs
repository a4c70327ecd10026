//! Empirical regret, its distribution and (ε, δ)-equilibrium, and Empirical
//! Price of Anarchy bounds against a table of optimal durations.

pub mod directions;
mod optima;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, ClusterKey, LocationId};
use crate::stats::{mean, median_lower, nearest_rank};
use crate::trace::{principal_mode, ModeGranularity, Trip, UserId};

pub use optima::{
    lookup_optimal, parse_optima_table, write_optima_table, FileTableProvider, OptimaCache, OptimaKey, OptimaProvider,
    OptimaQuery, OptimaRow, OptimaStatus, OptimaTable, OptimalDuration, ProviderError, ProviderReply, Regime,
    RetryPolicy, SimulatorProvider, MAX_REPOSITION_M,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    pub trip_id: String,
    pub user: UserId,
    pub cluster: ClusterKey,
    pub duration_s: i64,
    pub regret_s: f64,
    pub is_baseline: bool,
}

/// Regret of every member against the cluster's fastest trip. The baseline
/// is the minimum-duration trip; ties go to the earliest departure, then the
/// lowest user id. Records follow member order.
pub fn compute_regret(cluster: &Cluster, trips: &[Trip]) -> Vec<RegretRecord> {
    let baseline = cluster
        .members
        .iter()
        .copied()
        .min_by(|&a, &b| {
            let (ta, tb) = (&trips[a], &trips[b]);
            ta.duration_s
                .cmp(&tb.duration_s)
                .then(ta.departure_time.cmp(&tb.departure_time))
                .then(ta.user.cmp(&tb.user))
                .then(a.cmp(&b))
        })
        .expect("clusters are non-empty");
    let best = trips[baseline].duration_s;
    cluster
        .members
        .iter()
        .map(|&i| RegretRecord {
            trip_id: trips[i].id(),
            user: trips[i].user.clone(),
            cluster: cluster.key.clone(),
            duration_s: trips[i].duration_s,
            regret_s: (trips[i].duration_s - best) as f64,
            is_baseline: i == baseline,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretDistribution {
    /// Positive regrets before trimming, ascending.
    pub positive: Vec<f64>,
    /// Positive regrets at or below the trim percentile, ascending.
    pub retained: Vec<f64>,
    /// Cut-off used for trimming; `None` when there are no positive regrets.
    pub trim_threshold_s: Option<f64>,
    pub mean_s: f64,
    pub median_s: f64,
}

impl RegretDistribution {
    /// No positive regret: every user matched the baseline of their cluster.
    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn trimmed_count(&self) -> usize {
        self.positive.len() - self.retained.len()
    }

    /// Fraction of retained regrets at least `x`.
    pub fn fraction_geq(&self, x: f64) -> f64 {
        if self.retained.is_empty() {
            return 0.0;
        }
        let below = self.retained.partition_point(|v| *v < x);
        (self.retained.len() - below) as f64 / self.retained.len() as f64
    }

    /// Step points `(x, F̄(x))` at each distinct retained value.
    pub fn inverse_cdf(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for &v in &self.retained {
            if out.last().map(|p| p.0) != Some(v) {
                out.push((v, self.fraction_geq(v)));
            }
        }
        out
    }
}

/// Drop zero regrets, then trim values strictly above the nearest-rank
/// `trim_percentile` of the remaining positive regrets.
pub fn regret_distribution(records: &[RegretRecord], trim_percentile: f64) -> RegretDistribution {
    let mut positive: Vec<f64> = records.iter().map(|r| r.regret_s).filter(|r| *r > 0.0).collect();
    positive.sort_by(f64::total_cmp);
    if positive.is_empty() {
        return RegretDistribution {
            positive,
            retained: Vec::new(),
            trim_threshold_s: None,
            mean_s: 0.0,
            median_s: 0.0,
        };
    }
    let cut = nearest_rank(&positive, trim_percentile);
    let retained: Vec<f64> = positive.iter().copied().filter(|v| *v <= cut).collect();
    RegretDistribution {
        mean_s: mean(&retained),
        median_s: median_lower(&retained),
        positive,
        retained,
        trim_threshold_s: Some(cut),
    }
}

/// Smallest positive regret `x` such that at most a fraction `delta` of users
/// have regret strictly above `x`. Evaluated on the untrimmed positive
/// regrets, since trimming already discards the upper tail this quantile
/// describes. Returns 0 for an empty distribution.
pub fn epsilon_delta(dist: &RegretDistribution, delta: f64) -> f64 {
    let v = &dist.positive;
    let n = v.len() as f64;
    for (i, &x) in v.iter().enumerate() {
        if v.get(i + 1) == Some(&x) {
            continue;
        }
        let above = (v.len() - i - 1) as f64;
        if above <= delta * n + 1e-9 {
            return x;
        }
    }
    0.0
}

/// Per-trip inputs to the EPoA computation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpoaTrip<'a> {
    pub trip: &'a Trip,
    pub location: LocationId,
    pub school_id: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EPoAReport {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub car_light: Option<f64>,
    pub car_heavy: Option<f64>,
    pub transit: Option<f64>,
    pub included_car: usize,
    pub included_transit: usize,
    /// Excluded trips by reason.
    pub dropped: BTreeMap<String, usize>,
    pub recorded_car_s: f64,
    pub recorded_transit_s: f64,
    pub optimal_heavy_s: f64,
    pub optimal_light_s: f64,
    pub optimal_transit_s: f64,
}

fn missing_reason(opt: Option<&OptimalDuration>) -> &'static str {
    match opt {
        Some(o) if o.status != OptimaStatus::Ok => o.status.as_str(),
        _ => "missing",
    }
}

fn ratio(num: f64, den: f64, count: usize) -> Option<f64> {
    (count > 0 && den > 0.0).then(|| num / den)
}

/// Sum-of-durations ratios of recorded trips to optimal trips. Car trips
/// need `ok` heavy and light optima, transit trips an `ok` transit optimum;
/// the rest are excluded from both sums and counted by reason.
pub fn epoa_bounds(trips: &[EpoaTrip<'_>], table: &OptimaTable) -> EPoAReport {
    let mut dropped: BTreeMap<String, usize> = BTreeMap::new();
    let mut skip = |reason: String| *dropped.entry(reason).or_default() += 1;
    let mut sums = [0.0f64; 5];
    let (mut n_car, mut n_transit) = (0, 0);
    for t in trips {
        let mode = match principal_mode(t.trip, ModeGranularity::Binary) {
            Ok(m) => m,
            Err(_) => {
                skip("no_vehicle_mode".into());
                continue;
            }
        };
        let opt = table.get(&t.location, &t.school_id, mode);
        let dur = t.trip.duration_s as f64;
        if mode.is_private() {
            match opt.and_then(|o| o.heavy.zip(o.light).filter(|_| o.status == OptimaStatus::Ok)) {
                Some((heavy, light)) => {
                    sums[0] += dur;
                    sums[2] += heavy;
                    sums[3] += light;
                    n_car += 1;
                }
                None => skip(format!("car_{}", missing_reason(opt))),
            }
        } else {
            match opt.and_then(|o| o.transit.filter(|_| o.status == OptimaStatus::Ok)) {
                Some(transit) => {
                    sums[1] += dur;
                    sums[4] += transit;
                    n_transit += 1;
                }
                None => skip(format!("transit_{}", missing_reason(opt))),
            }
        }
    }
    let [rec_car, rec_tr, heavy, light, transit] = sums;
    let n = n_car + n_transit;
    EPoAReport {
        lower: ratio(rec_car + rec_tr, heavy + transit, n),
        upper: ratio(rec_car + rec_tr, light + transit, n),
        car_light: ratio(rec_car, light, n_car),
        car_heavy: ratio(rec_car, heavy, n_car),
        transit: ratio(rec_tr, transit, n_transit),
        included_car: n_car,
        included_transit: n_transit,
        dropped,
        recorded_car_s: rec_car,
        recorded_transit_s: rec_tr,
        optimal_heavy_s: heavy,
        optimal_light_s: light,
        optimal_transit_s: transit,
    }
}
