//! Cross-day behaviour: does a student keep the same mode, and the same route?
//!
//! Two routes `a`, `b` are the same when the area enclosed between them is
//! smaller than the mean of their width-`w` band areas:
//! `enclosed(a, b) < (band(a) + band(b)) / 2`. The band area is `w·L`, so the
//! test reads "the routes stay, on average, less than `w` apart".

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, GeoError, Polyline};
use crate::stats::fmt_sig6;
use crate::trace::{principal_mode, ModeClass, ModeGranularity, Trip, UserId};

/// Routes are densified to this spacing before any area is measured, so a
/// sparse trace does not cut corners.
pub const RESAMPLE_SPACING_M: f64 = 20.0;
/// Two trips of one user must start and end within this distance of each other.
pub const ANCHOR_TOLERANCE_M: f64 = 500.0;
pub const DEFAULT_BAND_WIDTH_M: f64 = 50.0;
pub const DEFAULT_CALIBRATION_OFFSETS_M: [f64; 3] = [100.0, 200.0, 400.0];
pub const DEFAULT_POSITIVE_JITTER_M: f64 = 5.0;
pub const MIN_CALIBRATION_TRIPS: usize = 10;

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("routes do not share anchors: endpoints differ by {distance_m:.0} m (limit {limit_m:.0} m)")]
    AnchorMismatch { distance_m: f64, limit_m: f64 },
    #[error("band width calibration failed: {0}")]
    CalibrationFailed(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Areas behind one route comparison, in m².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub enclosed: f64,
    pub contour_a: f64,
    pub contour_b: f64,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub user: UserId,
    pub trip_a: String,
    pub trip_b: String,
    #[serde(flatten)]
    pub verdict: PairVerdict,
}

fn reverse_fits_better(a: &Polyline, b: &Polyline) -> bool {
    let d = |p: geo::GeoPoint, q: geo::GeoPoint| p.distance_to(&q);
    d(a.first(), b.last()) + d(a.last(), b.first()) < d(a.first(), b.first()) + d(a.last(), b.last())
}

/// Same-route test at band width `w`.
///
/// `b` is reversed first when that lines its endpoints up better with `a`,
/// so the verdict ignores the direction either route was recorded in. Ties
/// of the criterion count as inconsistent.
pub fn route_consistent(a: &Polyline, b: &Polyline, w: f64) -> Result<PairVerdict, ConsistencyError> {
    if !(w.is_finite() && w > 0.0) {
        return Err(ConsistencyError::InvalidParameter(format!(
            "band width must be > 0, got {w}"
        )));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(GeoError::DegenerateTrip("routes need at least 2 points".into()).into());
    }
    let b = if reverse_fits_better(a, b) {
        b.reversed()
    } else {
        b.clone()
    };
    let gap = a.first().distance_to(&b.first()).max(a.last().distance_to(&b.last()));
    if gap > ANCHOR_TOLERANCE_M {
        return Err(ConsistencyError::AnchorMismatch {
            distance_m: gap,
            limit_m: ANCHOR_TOLERANCE_M,
        });
    }
    let a = geo::resample(a, RESAMPLE_SPACING_M);
    let b = geo::resample(&b, RESAMPLE_SPACING_M);
    let enclosed = geo::enclosed_area(&a, &b)?;
    let contour_a = geo::outer_contour_area(&a, w)?;
    let contour_b = geo::outer_contour_area(&b, w)?;
    Ok(PairVerdict {
        enclosed,
        contour_a,
        contour_b,
        consistent: enclosed < (contour_a + contour_b) / 2.0,
    })
}

/// Copy of `a` shifted `offset_m` to the left of its start-to-end chord.
pub fn lateral_translate(a: &Polyline, offset_m: f64) -> Result<Polyline, GeoError> {
    let chord = geo::project_point(&a.last(), &a.first());
    let len = chord.x.hypot(chord.y);
    let (nx, ny) = if len > 0.0 {
        (-chord.y / len, chord.x / len)
    } else {
        (1.0, 0.0)
    };
    a.translated(offset_m * nx, offset_m * ny)
}

/// Copy of `a` with each point moved by independent normal east/north noise.
pub fn jitter(a: &Polyline, sigma_m: f64, rng: &mut ChaCha8Rng) -> Result<Polyline, GeoError> {
    let normal =
        Normal::new(0.0, sigma_m.max(0.0)).map_err(|e| GeoError::InvalidParameter(format!("jitter sigma: {e}")))?;
    let pts = a
        .points()
        .iter()
        .map(|p| geo::offset_point(p, normal.sample(rng), normal.sample(rng)))
        .collect();
    Polyline::new(pts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub w: f64,
    pub negatives_rejected: f64,
    pub positives_accepted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub w: f64,
    pub rows: Vec<CalibrationRow>,
}

/// Candidate band widths 10, 20, .., 100 m.
pub fn default_candidates() -> Vec<f64> {
    (1..=10).map(|k| 10.0 * k as f64).collect()
}

/// Largest candidate `w` at which every trip is told apart from each of its
/// lateral translations by `offsets`. Each row also reports how many
/// (trip, jittered trip) pairs are accepted at that `w`.
pub fn calibrate_band_width(
    samples: &[Polyline],
    offsets: &[f64],
    candidates: &[f64],
    jitter_m: f64,
    seed: u64,
) -> Result<Calibration, ConsistencyError> {
    if samples.len() < MIN_CALIBRATION_TRIPS {
        return Err(ConsistencyError::InvalidParameter(format!(
            "calibration needs at least {MIN_CALIBRATION_TRIPS} trips, got {}",
            samples.len()
        )));
    }
    if offsets.is_empty() || candidates.is_empty() {
        return Err(ConsistencyError::InvalidParameter(
            "need offsets and candidate widths".into(),
        ));
    }
    let mut negatives = Vec::with_capacity(samples.len() * offsets.len());
    let mut positives = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        for &d in offsets {
            negatives.push((s, lateral_translate(s, d)?));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        positives.push((s, jitter(s, jitter_m, &mut rng)?));
    }
    let share = |pairs: &[(&Polyline, Polyline)], w: f64, want: bool| -> Result<f64, ConsistencyError> {
        let hits = pairs
            .par_iter()
            .map(|(a, b)| route_consistent(a, b, w).map(|v| v.consistent == want))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(hits.iter().filter(|h| **h).count() as f64 / pairs.len() as f64)
    };
    let mut rows = Vec::with_capacity(candidates.len());
    for &w in candidates {
        rows.push(CalibrationRow {
            w,
            negatives_rejected: share(&negatives, w, false)?,
            positives_accepted: share(&positives, w, true)?,
        });
    }
    let best = rows
        .iter()
        .filter(|r| r.negatives_rejected == 1.0)
        .map(|r| r.w)
        .fold(None, |m: Option<f64>, w| Some(m.map_or(w, |m| m.max(w))));
    match best {
        Some(w) => Ok(Calibration { w, rows }),
        None => {
            let diag: Vec<String> = rows
                .iter()
                .map(|r| format!("w={} rejected={:.3}", r.w, r.negatives_rejected))
                .collect();
            Err(ConsistencyError::CalibrationFailed(format!(
                "no candidate width rejects every translated negative ({})",
                diag.join(", ")
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserModes {
    pub user: UserId,
    /// Principal mode of each trip, in input order.
    pub modes: Vec<ModeClass>,
    /// The shared class, when every trip agrees.
    pub consistent_class: Option<ModeClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeConsistencyReport {
    pub granularity: ModeGranularity,
    /// Users with at least two trips.
    pub users: Vec<UserModes>,
    pub eligible: usize,
    pub ineligible: usize,
    /// Trips without a principal mode, ignored.
    pub skipped_trips: usize,
    pub consistent_by_class: BTreeMap<ModeClass, usize>,
    pub consistent_public: usize,
    pub consistent_private: usize,
    pub consistent_total: usize,
    pub consistent_fraction: f64,
}

impl ModeConsistencyReport {
    pub fn is_consistent(&self, user: &UserId) -> bool {
        self.users
            .iter()
            .any(|u| &u.user == user && u.consistent_class.is_some())
    }
}

fn group_by_user(trips: &[Trip]) -> BTreeMap<&UserId, Vec<&Trip>> {
    let mut by_user: BTreeMap<&UserId, Vec<&Trip>> = BTreeMap::new();
    for t in trips {
        by_user.entry(&t.user).or_default().push(t);
    }
    for v in by_user.values_mut() {
        v.sort_by_key(|t| t.departure_time);
    }
    by_user
}

/// Mode consistency over the given (morning) trips. Users with a single
/// usable trip are counted as ineligible.
pub fn mode_consistency_report(trips: &[Trip], granularity: ModeGranularity) -> ModeConsistencyReport {
    let mut skipped_trips = 0;
    let mut users = Vec::new();
    let mut ineligible = 0;
    for (user, ts) in group_by_user(trips) {
        let modes: Vec<ModeClass> = ts
            .iter()
            .filter_map(|t| match principal_mode(t, granularity) {
                Ok(m) => Some(m),
                Err(_) => {
                    skipped_trips += 1;
                    None
                }
            })
            .collect();
        if modes.len() < 2 {
            ineligible += 1;
            continue;
        }
        let consistent_class = modes.iter().all(|m| *m == modes[0]).then_some(modes[0]);
        users.push(UserModes {
            user: user.clone(),
            modes,
            consistent_class,
        });
    }
    let mut consistent_by_class = BTreeMap::new();
    for c in users.iter().filter_map(|u| u.consistent_class) {
        *consistent_by_class.entry(c).or_insert(0) += 1;
    }
    let consistent_private = consistent_by_class
        .iter()
        .filter(|(c, _)| c.is_private())
        .map(|(_, n)| n)
        .sum();
    let consistent_total: usize = consistent_by_class.values().sum();
    let eligible = users.len();
    ModeConsistencyReport {
        granularity,
        eligible,
        ineligible,
        skipped_trips,
        consistent_public: consistent_total - consistent_private,
        consistent_private,
        consistent_total,
        consistent_fraction: if eligible == 0 {
            0.0
        } else {
            consistent_total as f64 / eligible as f64
        },
        consistent_by_class,
        users,
    }
}

/// How a user's pairwise verdicts combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairAggregation {
    /// Every pair must be consistent.
    #[default]
    All,
    /// More than half of the pairs.
    Majority,
}

impl PairAggregation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(PairAggregation::All),
            "majority" => Some(PairAggregation::Majority),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRouteVerdict {
    pub user: UserId,
    pub n_trips: usize,
    pub mode_consistent: bool,
    /// None unless the user is mode consistent.
    pub route_consistent: Option<bool>,
    pub pairs: Vec<ConsistencyVerdict>,
    /// Why the routes could not be compared, if they could not.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteConsistencyReport {
    pub w: f64,
    pub aggregation: PairAggregation,
    pub users: Vec<UserRouteVerdict>,
    /// Mode-consistent users whose routes were compared.
    pub evaluated: usize,
    pub route_consistent: usize,
    pub fraction: f64,
}

/// Route consistency of every mode-consistent user. A user whose trips
/// cannot be compared (bad geometry, different anchors) is reported with
/// the error and left out of the fraction.
pub fn route_consistency_report(
    trips: &[Trip],
    modes: &ModeConsistencyReport,
    w: f64,
    aggregation: PairAggregation,
) -> RouteConsistencyReport {
    let groups: Vec<(&UserId, Vec<&Trip>)> = group_by_user(trips).into_iter().collect();
    let users: Vec<UserRouteVerdict> = groups
        .par_iter()
        .map(|(user, ts)| {
            let mode_consistent = modes.is_consistent(user);
            let mut v = UserRouteVerdict {
                user: (*user).clone(),
                n_trips: ts.len(),
                mode_consistent,
                route_consistent: None,
                pairs: Vec::new(),
                error: None,
            };
            if !mode_consistent {
                return v;
            }
            match user_pairs(user, ts, w) {
                Ok(pairs) => {
                    let ok = pairs.iter().filter(|p| p.verdict.consistent).count();
                    v.route_consistent = Some(match aggregation {
                        PairAggregation::All => ok == pairs.len(),
                        PairAggregation::Majority => 2 * ok > pairs.len(),
                    });
                    v.pairs = pairs;
                }
                Err(e) => v.error = Some(e.to_string()),
            }
            v
        })
        .collect();
    let evaluated = users.iter().filter(|u| u.route_consistent.is_some()).count();
    let route_consistent = users.iter().filter(|u| u.route_consistent == Some(true)).count();
    RouteConsistencyReport {
        w,
        aggregation,
        evaluated,
        route_consistent,
        fraction: if evaluated == 0 {
            0.0
        } else {
            route_consistent as f64 / evaluated as f64
        },
        users,
    }
}

fn user_pairs(user: &UserId, trips: &[&Trip], w: f64) -> Result<Vec<ConsistencyVerdict>, ConsistencyError> {
    let paths = trips.iter().map(|t| t.polyline()).collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for i in 0..paths.len() {
        for j in i + 1..paths.len() {
            out.push(ConsistencyVerdict {
                user: user.clone(),
                trip_a: trips[i].id(),
                trip_b: trips[j].id(),
                verdict: route_consistent(&paths[i], &paths[j], w)?,
            });
        }
    }
    Ok(out)
}

/// CSV `user_id,n_trips,mode_consistent,route_consistent`; the last column is
/// empty for users that were not compared.
pub fn write_user_verdicts<W: Write>(w: W, report: &RouteConsistencyReport) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["user_id", "n_trips", "mode_consistent", "route_consistent"])?;
    for u in &report.users {
        out.write_record([
            u.user.0.as_str(),
            &u.n_trips.to_string(),
            &u.mode_consistent.to_string(),
            &u.route_consistent.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// CSV of every compared pair with its areas.
pub fn write_pair_verdicts<W: Write>(w: W, report: &RouteConsistencyReport) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "user_id",
        "trip_a",
        "trip_b",
        "enclosed_m2",
        "contour_a_m2",
        "contour_b_m2",
        "consistent",
    ])?;
    for p in report.users.iter().flat_map(|u| &u.pairs) {
        out.write_record([
            p.user.0.as_str(),
            &p.trip_a,
            &p.trip_b,
            &fmt_sig6(p.verdict.enclosed),
            &fmt_sig6(p.verdict.contour_a),
            &fmt_sig6(p.verdict.contour_b),
            &p.verdict.consistent.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{offset_point, GeoPoint};

    fn anchor() -> GeoPoint {
        GeoPoint::new(1.35, 103.8).unwrap()
    }

    /// Polyline through east/north offsets from the anchor.
    fn line(pts: &[(f64, f64)]) -> Polyline {
        Polyline::new(pts.iter().map(|&(e, n)| offset_point(&anchor(), e, n)).collect()).unwrap()
    }

    fn straight(len: f64, step: f64) -> Polyline {
        let n = (len / step) as usize;
        line(&(0..=n).map(|i| (i as f64 * step, 0.0)).collect::<Vec<_>>())
    }

    #[test]
    fn identical_routes_are_consistent() {
        let a = straight(5000.0, 100.0);
        let v = route_consistent(&a, &a, 50.0).unwrap();
        assert_eq!(v.enclosed, 0.0);
        assert!(v.consistent);
    }

    #[test]
    fn lateral_copy_is_inconsistent() {
        let a = straight(5000.0, 100.0);
        let b = a.translated(0.0, 200.0).unwrap();
        let v = route_consistent(&a, &b, 50.0).unwrap();
        assert!((v.enclosed - 1_000_000.0).abs() / 1e6 < 0.01, "{}", v.enclosed);
        assert!((v.contour_a - 250_000.0).abs() / 250_000.0 < 0.01);
        assert!(!v.consistent);
    }

    #[test]
    fn small_jitter_is_consistent() {
        let a = straight(5000.0, 100.0);
        let b = line(
            &(0..=50)
                .map(|i| (i as f64 * 100.0, if i % 2 == 0 { 10.0 } else { -10.0 }))
                .collect::<Vec<_>>(),
        );
        let v = route_consistent(&a, &b, 50.0).unwrap();
        assert!(v.enclosed <= 50_000.0 + 1.0, "{}", v.enclosed);
        assert!(v.consistent);
    }

    #[test]
    fn direction_does_not_matter() {
        let a = line(&[(0.0, 0.0), (800.0, 300.0), (2000.0, 0.0)]);
        let b = line(&[(0.0, 30.0), (1000.0, -200.0), (2000.0, 20.0)]);
        let v = route_consistent(&a, &b, 50.0).unwrap();
        for (x, y) in [
            (a.reversed(), b.clone()),
            (a.clone(), b.reversed()),
            (b.clone(), a.clone()),
        ] {
            let u = route_consistent(&x, &y, 50.0).unwrap();
            assert!((u.enclosed - v.enclosed).abs() < 1e-6 * v.enclosed);
            assert_eq!(u.consistent, v.consistent);
        }
    }

    #[test]
    fn far_anchors_and_degenerate_paths_error() {
        let a = straight(2000.0, 100.0);
        let b = a.translated(0.0, 600.0).unwrap();
        assert!(matches!(
            route_consistent(&a, &b, 50.0),
            Err(ConsistencyError::AnchorMismatch { .. })
        ));
        let p = line(&[(0.0, 0.0)]);
        assert!(matches!(route_consistent(&p, &a, 50.0), Err(ConsistencyError::Geo(_))));
        assert!(route_consistent(&a, &a, 0.0).is_err());
    }

    fn samples() -> Vec<Polyline> {
        (0..10).map(|k| straight(1000.0 + 100.0 * k as f64, 50.0)).collect()
    }

    #[test]
    fn calibration_straight_lines() {
        let c = calibrate_band_width(&samples(), &[200.0], &default_candidates(), 5.0, 1).unwrap();
        assert_eq!(c.w, 100.0);
        assert!(c.rows.iter().all(|r| r.negatives_rejected == 1.0));

        // A 10 m shift sits inside every band of 20 m or more; at w = 10 the
        // criterion is an exact tie, so either outcome is acceptable there.
        match calibrate_band_width(&samples(), &[10.0], &default_candidates(), 5.0, 1) {
            Ok(c) => assert_eq!(c.w, 10.0),
            Err(e) => assert!(matches!(e, ConsistencyError::CalibrationFailed(_))),
        }
        for s in samples() {
            let b = lateral_translate(&s, 10.0).unwrap();
            assert!(default_candidates()[1..]
                .iter()
                .all(|&w| route_consistent(&s, &b, w).unwrap().consistent));
        }

        assert!(matches!(
            calibrate_band_width(&samples(), &[0.0], &default_candidates(), 5.0, 1),
            Err(ConsistencyError::CalibrationFailed(_))
        ));
        assert!(calibrate_band_width(&samples()[..5], &[200.0], &default_candidates(), 5.0, 1).is_err());
    }

    fn trip(user: &str, day: i64, mode: crate::trace::Mode, path: &Polyline) -> Trip {
        let track = path
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| crate::trace::TrackPoint {
                ts: day * 86_400 + 60 * i as i64,
                point: *p,
            })
            .collect();
        Trip::from_track(UserId(user.into()), track, mode).unwrap()
    }

    #[test]
    fn mode_report_counts() {
        use crate::trace::Mode;
        let p = straight(2000.0, 100.0);
        let trips = vec![
            trip("a", 0, Mode::Car, &p),
            trip("a", 1, Mode::Car, &p),
            trip("a", 2, Mode::Car, &p),
            trip("b", 0, Mode::Bus, &p),
            trip("b", 1, Mode::Metro, &p),
            trip("c", 0, Mode::Bus, &p),
        ];
        let three = mode_consistency_report(&trips, ModeGranularity::ThreeWay);
        assert_eq!((three.eligible, three.ineligible, three.consistent_total), (2, 1, 1));
        assert_eq!(three.consistent_by_class.get(&ModeClass::Car), Some(&1));
        let bin = mode_consistency_report(&trips, ModeGranularity::Binary);
        assert_eq!((bin.consistent_public, bin.consistent_private), (1, 1));
        assert_eq!(bin.consistent_fraction, 1.0);
    }

    #[test]
    fn route_report_pairwise() {
        use crate::trace::Mode;
        // Opposite sides of a 2 km wide loop.
        let north = line(&[(0.0, 0.0), (0.0, 1000.0), (2000.0, 1000.0), (2000.0, 0.0)]);
        let south = line(&[(0.0, 0.0), (0.0, -1000.0), (2000.0, -1000.0), (2000.0, 0.0)]);
        let trips = vec![
            trip("same", 0, Mode::Car, &north),
            trip("same", 1, Mode::Car, &north),
            trip("split", 0, Mode::Car, &north),
            trip("split", 1, Mode::Car, &south),
            trip("split", 2, Mode::Car, &north),
        ];
        let modes = mode_consistency_report(&trips, ModeGranularity::ThreeWay);
        let r = route_consistency_report(&trips, &modes, 50.0, PairAggregation::All);
        let by: BTreeMap<_, _> = r.users.iter().map(|u| (u.user.0.as_str(), u)).collect();
        assert_eq!(by["same"].route_consistent, Some(true));
        assert_eq!(by["split"].route_consistent, Some(false));
        assert_eq!(by["split"].pairs.len(), 3);
        assert_eq!(r.fraction, 0.5);
        let r = route_consistency_report(&trips, &modes, 50.0, PairAggregation::Majority);
        assert_eq!(r.route_consistent, 1);

        let mut buf = Vec::new();
        write_user_verdicts(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("user_id,n_trips,mode_consistent,route_consistent\nsame,2,true,true\n"));
    }
}
