//! Synthetic location traces for users routed along a solved flow.
//!
//! Each simulated weekday a user produces, in local time:
//! a short burst of night samples at home from 04:50, a dwell at home
//! starting `dwell_s` before departure, the trip itself, a dwell at school of
//! `dwell_s`, and a burst of samples at school from 09:05. Bursts are
//! separated from the trip by gaps longer than the segmentation gap limit,
//! so each day yields exactly one trip.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FlowAssignment, RoadNetwork, SimError};
use crate::geo::{offset_point, GeoPoint};
use crate::stats::fmt_sig6;
use crate::trace::{LocalClock, LocationSample, Mode, School, Timestamp, UserId};

/// 2016-03-07, a Monday.
pub const DEFAULT_FIRST_DAY: i64 = 16_867;

const BURST_SAMPLES: i64 = 12;
const NIGHT_BURST_S: i64 = 4 * 3600 + 50 * 60;
const SCHOOL_BURST_S: i64 = 9 * 3600 + 5 * 60;

/// Extra travel time added to a random subset of users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detour {
    /// Share of users affected; the count is rounded to nearest.
    pub fraction: f64,
    pub delay_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_users: usize,
    /// Simulated weekdays, starting on `first_day`.
    pub days: usize,
    pub noise_sigma_m: f64,
    pub period_s: i64,
    pub seed: u64,
    /// Local day number of the first simulated day; must be a Monday.
    pub first_day: i64,
    pub utc_offset_s: i64,
    /// Departures are uniform in `[depart_start_s, depart_start_s + depart_span_s]`
    /// seconds past local midnight.
    pub depart_start_s: i64,
    pub depart_span_s: i64,
    /// Dwell before departure and after arrival.
    pub dwell_s: i64,
    /// Homes are uniform in a disc of this radius around the origin node.
    pub home_jitter_m: f64,
    pub mode: Mode,
    pub detour: Option<Detour>,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_users: 100,
            days: 1,
            noise_sigma_m: 0.0,
            period_s: 13,
            seed: 0,
            first_day: DEFAULT_FIRST_DAY,
            utc_offset_s: 8 * 3600,
            depart_start_s: 6 * 3600 + 60,
            depart_span_s: 13 * 60,
            dwell_s: 600,
            home_jitter_m: 100.0,
            mode: Mode::Car,
            detour: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub user: UserId,
    pub commodity: usize,
    pub path_id: String,
    /// Travel time including any detour.
    pub true_duration_s: f64,
    pub detour_s: f64,
    pub home: GeoPoint,
    pub school_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    /// Ordered by (user, timestamp).
    pub samples: Vec<LocationSample>,
    /// One row per user, in user order.
    pub truth: Vec<GroundTruth>,
    /// One school per commodity destination.
    pub schools: Vec<School>,
}

/// Integer apportionment of `total` proportional to `weights`: floors of
/// the quotas, then one extra unit each to the largest remainders (lower
/// index first on ties).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub fn school_id_for(node: usize) -> String {
    format!("S{node}")
}

struct Leg {
    from: GeoPoint,
    to: GeoPoint,
    start_s: f64,
    duration_s: f64,
}

struct Route {
    legs: Vec<Leg>,
    end: GeoPoint,
    total_s: f64,
}

impl Route {
    fn position(&self, t: f64) -> GeoPoint {
        for leg in &self.legs {
            if t < leg.start_s + leg.duration_s {
                let f = ((t - leg.start_s) / leg.duration_s).clamp(0.0, 1.0);
                return GeoPoint {
                    lat: leg.from.lat + f * (leg.to.lat - leg.from.lat),
                    lon: leg.from.lon + f * (leg.to.lon - leg.from.lon),
                };
            }
        }
        self.end
    }
}

struct UserPlan {
    user: UserId,
    commodity: usize,
    path: usize,
    detour_s: f64,
}

fn validate(params: &SynthParams) -> Result<(), SimError> {
    let bad = |m: &str| Err(SimError::InvalidParameter(m.into()));
    if params.n_users == 0 {
        return bad("n_users must be >= 1");
    }
    if params.days == 0 {
        return bad("days must be >= 1");
    }
    if params.period_s <= 0 {
        return bad("sampling period must be > 0");
    }
    if !(params.noise_sigma_m.is_finite() && params.noise_sigma_m >= 0.0) {
        return bad("noise sigma must be >= 0");
    }
    if !(params.home_jitter_m.is_finite() && params.home_jitter_m >= 0.0) {
        return bad("home jitter must be >= 0");
    }
    if params.dwell_s <= 0 || params.depart_span_s < 0 {
        return bad("dwell must be > 0 and the departure span >= 0");
    }
    if LocalClock::new(params.utc_offset_s).weekday(LocalClock::new(params.utc_offset_s).at(params.first_day, 43_200))
        != 0
    {
        return bad("first_day must be a Monday");
    }
    if let Some(d) = params.detour {
        if !(0.0..=1.0).contains(&d.fraction) || !(d.delay_s.is_finite() && d.delay_s >= 0.0) {
            return bad("detour fraction must be in [0, 1] and delay >= 0");
        }
    }
    Ok(())
}

/// Sample traces of `params.n_users` users per simulated day.
///
/// Users are split over commodities by demand and over each commodity's
/// paths by path flow, both with largest-remainder rounding. A user's
/// traversal time of an edge is its latency at the assigned flow.
pub fn synthesize_traces(
    net: &RoadNetwork,
    flows: &FlowAssignment,
    params: &SynthParams,
) -> Result<SynthOutput, SimError> {
    validate(params)?;
    if flows.paths.is_empty() || flows.paths.iter().any(|p| p.is_empty()) {
        return Err(SimError::MissingDecomposition);
    }
    let demands: Vec<f64> = flows.paths.iter().map(|ps| ps.iter().map(|p| p.flow).sum()).collect();
    let width = params.n_users.saturating_sub(1).to_string().len().max(3);
    let mut plans = Vec::with_capacity(params.n_users);
    for (k, users_k) in largest_remainder(&demands, params.n_users).into_iter().enumerate() {
        let weights: Vec<f64> = flows.paths[k].iter().map(|p| p.flow).collect();
        for (j, count) in largest_remainder(&weights, users_k).into_iter().enumerate() {
            for _ in 0..count {
                plans.push(UserPlan {
                    user: UserId(format!("u{:0width$}", plans.len())),
                    commodity: k,
                    path: j,
                    detour_s: 0.0,
                });
            }
        }
    }
    if let Some(d) = params.detour {
        let n = (d.fraction * params.n_users as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(u64::MAX);
        for i in rand::seq::index::sample(&mut rng, params.n_users, n) {
            plans[i].detour_s = d.delay_s;
        }
    }

    let mut schools = Vec::new();
    for ps in &flows.paths {
        let last = *ps[0].edges.last().ok_or(SimError::MissingDecomposition)?;
        let dest = net.edges()[last].to;
        let location = net.embedding(dest).ok_or(SimError::MissingEmbedding(dest))?;
        if !schools.iter().any(|s: &School| s.id == school_id_for(dest)) {
            schools.push(School {
                id: school_id_for(dest),
                location,
            });
        }
    }

    let per_user: Result<Vec<_>, SimError> = plans
        .par_iter()
        .enumerate()
        .map(|(i, plan)| user_traces(net, flows, params, i, plan))
        .collect();
    let mut samples = Vec::new();
    let mut truth = Vec::with_capacity(plans.len());
    for (s, t) in per_user? {
        samples.extend(s);
        truth.push(t);
    }
    Ok(SynthOutput {
        samples,
        truth,
        schools,
    })
}

fn user_traces(
    net: &RoadNetwork,
    flows: &FlowAssignment,
    params: &SynthParams,
    index: usize,
    plan: &UserPlan,
) -> Result<(Vec<LocationSample>, GroundTruth), SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64);
    let edges = &flows.paths[plan.commodity][plan.path].edges;
    let first = &net.edges()[edges[0]];
    let origin = net
        .embedding(first.from)
        .ok_or(SimError::MissingEmbedding(first.from))?;
    let radius = params.home_jitter_m * rng.random::<f64>().sqrt();
    let angle = std::f64::consts::TAU * rng.random::<f64>();
    let home = offset_point(&origin, radius * angle.cos(), radius * angle.sin());

    let base_s: f64 = edges
        .iter()
        .map(|&e| net.edges()[e].latency.eval(flows.edge_flows[e]))
        .sum();
    let total_s = base_s + plan.detour_s;
    let stretch = if base_s > 0.0 { total_s / base_s } else { 1.0 };
    let mut legs = Vec::new();
    let mut at = home;
    let mut clock_s = 0.0;
    for &e in edges {
        let edge = &net.edges()[e];
        let to = net.embedding(edge.to).ok_or(SimError::MissingEmbedding(edge.to))?;
        let duration_s = edge.latency.eval(flows.edge_flows[e]) * stretch;
        if duration_s > 0.0 {
            legs.push(Leg {
                from: at,
                to,
                start_s: clock_s,
                duration_s,
            });
        }
        clock_s += duration_s;
        at = to;
    }
    let route = Route { legs, end: at, total_s };
    let dest_node = net.edges()[*edges.last().expect("non-empty path")].to;

    let clock = LocalClock::new(params.utc_offset_s);
    let noise = Normal::new(0.0, params.noise_sigma_m.max(f64::MIN_POSITIVE))
        .map_err(|e| SimError::InvalidParameter(e.to_string()))?;
    let mut samples = Vec::new();
    let mut emit = |rng: &mut ChaCha8Rng, ts: Timestamp, p: GeoPoint, mode: Mode| {
        let (dx, dy) = if params.noise_sigma_m > 0.0 {
            (noise.sample(rng), noise.sample(rng))
        } else {
            (0.0, 0.0)
        };
        samples.push(LocationSample {
            user: plan.user.clone(),
            ts,
            point: offset_point(&p, dx, dy),
            mode: Some(mode),
        });
    };
    for d in 0..params.days as i64 {
        let day = params.first_day + (d / 5) * 7 + d % 5;
        for k in 0..BURST_SAMPLES {
            emit(
                &mut rng,
                clock.at(day, NIGHT_BURST_S) + k * params.period_s,
                home,
                Mode::Stationary,
            );
        }
        let depart = clock.at(day, params.depart_start_s + rng.random_range(0..=params.depart_span_s));
        let arrive = depart as f64 + route.total_s;
        let mut ts = depart - params.dwell_s + rng.random_range(0..params.period_s);
        let end = arrive + params.dwell_s as f64;
        let school_burst = clock.at(day, SCHOOL_BURST_S);
        if end >= school_burst as f64 - params.dwell_s as f64 {
            return Err(SimError::InvalidParameter(format!(
                "trip of {total_s:.0} s does not fit before the school-hours burst"
            )));
        }
        while (ts as f64) <= end {
            let t = (ts - depart) as f64;
            if t < 0.0 {
                emit(&mut rng, ts, home, Mode::Stationary);
            } else if t < route.total_s {
                emit(&mut rng, ts, route.position(t), params.mode);
            } else {
                emit(&mut rng, ts, route.end, Mode::Stationary);
            }
            ts += params.period_s;
        }
        for k in 0..BURST_SAMPLES {
            emit(
                &mut rng,
                school_burst + k * params.period_s,
                route.end,
                Mode::Stationary,
            );
        }
    }
    let truth = GroundTruth {
        user: plan.user.clone(),
        commodity: plan.commodity,
        path_id: format!("c{}p{}", plan.commodity, plan.path),
        true_duration_s: total_s,
        detour_s: plan.detour_s,
        home,
        school_id: school_id_for(dest_node),
    };
    Ok((samples, truth))
}

/// CSV `user_id,path_id,true_duration_s`.
pub fn write_ground_truth<W: Write>(w: W, truth: &[GroundTruth]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["user_id", "path_id", "true_duration_s"])?;
    for t in truth {
        out.write_record([t.user.0.as_str(), &t.path_id, &fmt_sig6(t.true_duration_s)])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgame::{pigou_embedded, wardrop_equilibrium, SolverParams};
    use crate::trace::{segment_user, SegmentParams};

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[1.0], 100), vec![100]);
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 7), vec![1, 2, 4]);
        assert_eq!(largest_remainder(&[], 7), Vec::<usize>::new());
    }

    #[test]
    fn first_day_is_monday() {
        let clock = LocalClock::new(8 * 3600);
        assert_eq!(clock.weekday(clock.at(DEFAULT_FIRST_DAY, 0)), 0);
    }

    #[test]
    fn noiseless_user_recovers_duration() {
        let (net, dem) = pigou_embedded(1800.0);
        let eq = wardrop_equilibrium(&net, &dem, &SolverParams::default()).unwrap();
        let params = SynthParams {
            n_users: 1,
            ..SynthParams::default()
        };
        let out = synthesize_traces(&net, &eq, &params).unwrap();
        assert_eq!(out.truth.len(), 1);
        let seg = segment_user(&out.samples, &SegmentParams::default()).unwrap();
        assert_eq!(seg.trips.len(), 1);
        let d = seg.trips[0].duration_s as f64;
        assert!((d - out.truth[0].true_duration_s).abs() <= 13.0, "{d}");
    }

    #[test]
    fn deterministic_and_counted() {
        let (net, dem) = pigou_embedded(1800.0);
        let eq = wardrop_equilibrium(&net, &dem, &SolverParams::default()).unwrap();
        let params = SynthParams {
            n_users: 100,
            days: 2,
            noise_sigma_m: 15.0,
            seed: 7,
            ..SynthParams::default()
        };
        let a = synthesize_traces(&net, &eq, &params).unwrap();
        let b = synthesize_traces(&net, &eq, &params).unwrap();
        assert_eq!(a, b);
        assert!(a.truth.iter().all(|t| t.path_id == "c0p0"));
        let c = synthesize_traces(&net, &eq, &SynthParams { seed: 8, ..params }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn missing_decomposition() {
        let (net, dem) = pigou_embedded(1800.0);
        let mut eq = wardrop_equilibrium(&net, &dem, &SolverParams::default()).unwrap();
        eq.paths.clear();
        assert!(matches!(
            synthesize_traces(&net, &eq, &SynthParams::default()),
            Err(SimError::MissingDecomposition)
        ));
    }
}
