use serde::{Deserialize, Serialize};

use super::profile::medoid_index;
use super::{LocationSample, Mode, ModeSource, PointOfInterest, TraceError, TrackPoint, Trip};
use crate::geo::{haversine_m, GeoPoint};

/// Median speed above which an unlabelled trip is taken to be a car trip.
pub const STUB_CAR_SPEED_MPS: f64 = 7.0;

/// Medoids of very long dwell runs are computed on an evenly spaced subset.
const MEDOID_SAMPLE_CAP: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentParams {
    /// A step slower than this is a stop.
    pub v_stop_mps: f64,
    /// Minimum dwell for a stop to become a point of interest.
    pub t_stop_s: i64,
    /// Moving-average window, odd.
    pub smooth_window: usize,
    /// Sampling gaps longer than this split the track; no trip spans one.
    pub max_gap_s: i64,
    /// Raw samples this close to a POI still belong to the dwell.
    pub dwell_radius_m: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            v_stop_mps: 1.0,
            t_stop_s: 300,
            smooth_window: 5,
            max_gap_s: 1800,
            dwell_radius_m: 60.0,
        }
    }
}

impl SegmentParams {
    pub fn validate(&self) -> Result<(), TraceError> {
        if !(self.v_stop_mps.is_finite() && self.v_stop_mps > 0.0) {
            return Err(TraceError::InvalidParameter("v_stop must be > 0".into()));
        }
        if self.t_stop_s <= 0 {
            return Err(TraceError::InvalidParameter("t_stop must be > 0".into()));
        }
        if self.smooth_window == 0 || self.smooth_window.is_multiple_of(2) {
            return Err(TraceError::InvalidParameter(
                "smoothing window must be odd and >= 1".into(),
            ));
        }
        if self.max_gap_s <= 0 {
            return Err(TraceError::InvalidParameter("max_gap must be > 0".into()));
        }
        if !(self.dwell_radius_m.is_finite() && self.dwell_radius_m >= 0.0) {
            return Err(TraceError::InvalidParameter("dwell radius must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segmentation {
    pub pois: Vec<PointOfInterest>,
    pub trips: Vec<Trip>,
}

/// Centered moving average over `window` samples, truncated at the ends.
pub fn smooth(track: &[TrackPoint], window: usize) -> Result<Vec<TrackPoint>, TraceError> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(TraceError::InvalidParameter(format!(
            "smoothing window must be odd and >= 1, got {window}"
        )));
    }
    let half = window / 2;
    let n = track.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let k = (hi - lo + 1) as f64;
            let (slat, slon) = track[lo..=hi]
                .iter()
                .fold((0.0, 0.0), |acc, p| (acc.0 + p.point.lat, acc.1 + p.point.lon));
            TrackPoint {
                ts: track[i].ts,
                point: GeoPoint {
                    lat: slat / k,
                    lon: slon / k,
                },
            }
        })
        .collect())
}

/// Smooth one user's samples and split them into POIs and trips.
pub fn segment_user(samples: &[LocationSample], params: &SegmentParams) -> Result<Segmentation, TraceError> {
    params.validate()?;
    let raw: Vec<TrackPoint> = samples
        .iter()
        .map(|s| TrackPoint {
            ts: s.ts,
            point: s.point,
        })
        .collect();
    let smoothed = smooth(&raw, params.smooth_window)?;
    segment_trips(&smoothed, samples, params)
}

#[derive(Debug, Clone, Copy)]
struct Dwell {
    start: usize,
    end: usize,
    location: GeoPoint,
}

fn dwell_location(raw: &[LocationSample], start: usize, end: usize) -> GeoPoint {
    let len = end - start + 1;
    let pts: Vec<GeoPoint> = if len > MEDOID_SAMPLE_CAP {
        (0..MEDOID_SAMPLE_CAP)
            .map(|i| raw[start + i * (len - 1) / (MEDOID_SAMPLE_CAP - 1)].point)
            .collect()
    } else {
        raw[start..=end].iter().map(|s| s.point).collect()
    };
    pts[medoid_index(&pts)]
}

/// Dwell runs within one gap-free piece `[lo, hi]` of the track.
fn find_dwells(
    smoothed: &[TrackPoint],
    raw: &[LocationSample],
    lo: usize,
    hi: usize,
    params: &SegmentParams,
) -> Vec<Dwell> {
    let mut dwells: Vec<Dwell> = Vec::new();
    let mut run_start: Option<usize> = None;
    let close = |start: usize, end: usize, dwells: &mut Vec<Dwell>| {
        if smoothed[end].ts - smoothed[start].ts < params.t_stop_s {
            return;
        }
        let location = dwell_location(raw, start, end);
        if let Some(prev) = dwells.last_mut() {
            if haversine_m(&prev.location, &location) <= params.dwell_radius_m {
                prev.end = end;
                prev.location = dwell_location(raw, prev.start, end);
                return;
            }
        }
        dwells.push(Dwell { start, end, location });
    };
    for i in lo..hi {
        let dt = (smoothed[i + 1].ts - smoothed[i].ts) as f64;
        let v = haversine_m(&smoothed[i].point, &smoothed[i + 1].point) / dt;
        if v < params.v_stop_mps {
            run_start.get_or_insert(i);
        } else if let Some(s) = run_start.take() {
            close(s, i, &mut dwells);
        }
    }
    if let Some(s) = run_start {
        close(s, hi, &mut dwells);
    }
    dwells
}

/// Moving samples used to extrapolate a departure or arrival time.
const BOUNDARY_FIT_SAMPLES: usize = 16;

/// Zero crossing of the least-squares line through (time, distance to
/// `anchor`) over the samples `idx`. `min_slope` is signed: positive for
/// motion away from the anchor, negative for motion toward it, and the fit
/// is rejected unless its slope exceeds it in that direction.
fn crossing_time(raw: &[LocationSample], idx: &[usize], anchor: &GeoPoint, min_slope: f64) -> Option<i64> {
    if idx.len() < 2 {
        return None;
    }
    let t0 = raw[idx[0]].ts;
    let pts: Vec<(f64, f64)> = idx
        .iter()
        .map(|&i| ((raw[i].ts - t0) as f64, haversine_m(&raw[i].point, anchor)))
        .collect();
    let n = pts.len() as f64;
    let (mt, md) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |a, p| {
        (a.0 + (p.0 - mt) * (p.1 - md), a.1 + (p.0 - mt) * (p.0 - mt))
    });
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let steep = if min_slope >= 0.0 {
        slope > min_slope
    } else {
        slope < min_slope
    };
    if !steep {
        return None;
    }
    let t = mt - md / slope;
    t.is_finite().then(|| t0 + t.round() as i64)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Trip over raw samples `dep..=arr`; `from`/`to` carry the sample index,
/// POI location, and the estimated departure/arrival time.
fn build_trip(raw: &[LocationSample], from: (usize, PointOfInterest), to: (usize, PointOfInterest)) -> Trip {
    let (dep, origin) = from;
    let (arr, destination) = to;
    let path: Vec<TrackPoint> = raw[dep..=arr]
        .iter()
        .map(|s| TrackPoint {
            ts: s.ts,
            point: s.point,
        })
        .collect();
    let steps: Vec<f64> = path.windows(2).map(|w| haversine_m(&w[0].point, &w[1].point)).collect();
    let distance_m: f64 = steps.iter().sum();

    let labelled = raw[dep..arr].iter().all(|s| s.mode.is_some());
    let (segment_modes, mode_source) = if labelled {
        let mut segs: Vec<(Mode, f64)> = Vec::new();
        for (s, d) in raw[dep..arr].iter().zip(&steps) {
            let m = s.mode.expect("checked above");
            match segs.last_mut() {
                Some(last) if last.0 == m => last.1 += d,
                _ => segs.push((m, *d)),
            }
        }
        (segs, ModeSource::Labels)
    } else {
        let mut speeds: Vec<f64> = path
            .windows(2)
            .zip(&steps)
            .map(|(w, d)| d / (w[1].ts - w[0].ts) as f64)
            .collect();
        let m = if median(&mut speeds) > STUB_CAR_SPEED_MPS {
            Mode::Car
        } else {
            Mode::Walking
        };
        (vec![(m, distance_m)], ModeSource::SpeedStub)
    };

    Trip {
        user: raw[dep].user.clone(),
        origin,
        destination,
        departure_time: origin.departure,
        arrival_time: destination.arrival,
        path,
        duration_s: destination.arrival - origin.departure,
        distance_m,
        segment_modes,
        mode_source,
    }
}

/// Split a smoothed track into points of interest and the trips between them.
///
/// Stops are detected on `smoothed`; `raw` (same timestamps) supplies the
/// trip geometry, distances and mode labels. Each trip is delimited by the
/// last/first raw sample within the dwell radius of its POIs, which undoes
/// the boundary blur introduced by smoothing. Departure and arrival times
/// are then extrapolated from the first/last moving samples to the moment
/// the track leaves/reaches the POI, falling back to the delimiting sample
/// time when the motion is too short to fit.
pub fn segment_trips(
    smoothed: &[TrackPoint],
    raw: &[LocationSample],
    params: &SegmentParams,
) -> Result<Segmentation, TraceError> {
    params.validate()?;
    if smoothed.len() != raw.len() {
        return Err(TraceError::MalformedTrack(format!(
            "smoothed track has {} points, raw has {}",
            smoothed.len(),
            raw.len()
        )));
    }
    for (i, w) in smoothed.windows(2).enumerate() {
        if w[1].ts <= w[0].ts || raw[i + 1].ts != w[1].ts {
            return Err(TraceError::MalformedTrack(format!(
                "timestamps not strictly increasing at index {}",
                i + 1
            )));
        }
    }
    if let Some(w) = raw.windows(2).find(|w| w[0].user != w[1].user) {
        return Err(TraceError::MalformedTrack(format!(
            "track mixes users {} and {}",
            w[0].user, w[1].user
        )));
    }
    let mut out = Segmentation::default();
    if raw.is_empty() {
        return Ok(out);
    }

    let mut pieces = Vec::new();
    let mut lo = 0;
    for i in 0..raw.len() - 1 {
        if raw[i + 1].ts - raw[i].ts > params.max_gap_s {
            pieces.push((lo, i));
            lo = i + 1;
        }
    }
    pieces.push((lo, raw.len() - 1));

    let within = |i: usize, loc: &GeoPoint| haversine_m(&raw[i].point, loc) <= params.dwell_radius_m;

    for (lo, hi) in pieces {
        let dwells = find_dwells(smoothed, raw, lo, hi, params);
        if dwells.is_empty() {
            continue;
        }
        // refined [arrival, departure] sample index per dwell
        let mut bounds: Vec<(usize, usize)> = dwells.iter().map(|d| (d.start, d.end)).collect();
        // The track has left a POI once it is beyond twice the dwell radius;
        // a lone noisy sample just outside the radius does not end the dwell.
        let far = |i: usize, loc: &GeoPoint| haversine_m(&raw[i].point, loc) > 2.0 * params.dwell_radius_m;
        for k in 0..dwells.len().saturating_sub(1) {
            let next_start = dwells[k + 1].start;
            let (from, to) = (&dwells[k].location, &dwells[k + 1].location);
            let start = bounds[k].1;
            let leave = (start + 1..next_start).find(|&i| far(i, from)).unwrap_or(next_start);
            let dep = (start..leave).rev().find(|&i| within(i, from)).unwrap_or(start);
            let reach = (dep + 1..next_start).rev().find(|&i| far(i, to)).unwrap_or(dep);
            let arr = (reach + 1..=next_start)
                .find(|&i| i > dep && within(i, to))
                .unwrap_or(next_start);
            bounds[k].1 = dep;
            bounds[k + 1].0 = arr;
        }
        let mut times: Vec<(i64, i64)> = bounds.iter().map(|b| (raw[b.0].ts, raw[b.1].ts)).collect();
        for k in 0..dwells.len().saturating_sub(1) {
            let (dep, arr) = (bounds[k].1, bounds[k + 1].0);
            let moving = dep + 1..arr;
            let head: Vec<usize> = moving.clone().take(BOUNDARY_FIT_SAMPLES).collect();
            let tail: Vec<usize> = moving.rev().take(BOUNDARY_FIT_SAMPLES).collect();
            if let Some(t) = crossing_time(raw, &head, &dwells[k].location, params.v_stop_mps) {
                times[k].1 = t.clamp(raw[dwells[k].end].ts, raw[dep + 1].ts);
            }
            if let Some(t) = crossing_time(raw, &tail, &dwells[k + 1].location, -params.v_stop_mps) {
                times[k + 1].0 = t.clamp(raw[arr - 1].ts, raw[dwells[k + 1].start].ts);
            }
        }
        let first_poi = out.pois.len();
        for (d, t) in dwells.iter().zip(&times) {
            out.pois.push(PointOfInterest {
                location: d.location,
                arrival: t.0,
                departure: t.1,
            });
        }
        for k in 0..dwells.len().saturating_sub(1) {
            out.trips.push(build_trip(
                raw,
                (bounds[k].1, out.pois[first_poi + k]),
                (bounds[k + 1].0, out.pois[first_poi + k + 1]),
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::offset_point;
    use crate::trace::UserId;

    fn base() -> GeoPoint {
        GeoPoint::new(1.35, 103.8).unwrap()
    }

    fn sample(ts: i64, p: GeoPoint) -> LocationSample {
        LocationSample {
            user: UserId::from("u1"),
            ts,
            point: p,
            mode: None,
        }
    }

    /// stay(30 min) - move east at `speed` for 10 min - stay(30 min), 13 s sampling,
    /// with an optional mid-move stop of `stop_s` seconds.
    fn stay_move_stay(speed: f64, stop_s: i64) -> Vec<LocationSample> {
        let period = 13;
        let (stay, moving) = (1800_i64, 600_i64);
        let total = stay + moving + stop_s + stay;
        let mut out = Vec::new();
        let mut t = 0;
        while t <= total {
            let x = if t <= stay {
                0.0
            } else {
                let mut dt = (t - stay) as f64;
                let half = moving as f64 / 2.0;
                if dt > half {
                    dt = (dt - stop_s as f64).max(half);
                }
                speed * dt.min(moving as f64)
            };
            out.push(sample(1_000_000 + t, offset_point(&base(), x, 0.0)));
            t += period;
        }
        out
    }

    #[test]
    fn smooth_identity_and_constant() {
        let track: Vec<TrackPoint> = (0..7)
            .map(|i| TrackPoint {
                ts: i * 13,
                point: offset_point(&base(), i as f64 * 10.0, 0.0),
            })
            .collect();
        assert_eq!(smooth(&track, 1).unwrap(), track);
        let flat: Vec<TrackPoint> = (0..7).map(|i| TrackPoint { ts: i, point: base() }).collect();
        for p in smooth(&flat, 5).unwrap() {
            assert!((p.point.lat - 1.35).abs() < 1e-12 && (p.point.lon - 103.8).abs() < 1e-12);
        }
        assert!(smooth(&flat, 4).is_err());
        assert!(smooth(&[], 3).unwrap().is_empty());
    }

    #[test]
    fn smooth_damps_outlier() {
        let mut track: Vec<TrackPoint> = (0..21)
            .map(|i| TrackPoint {
                ts: i * 13,
                point: offset_point(&base(), i as f64 * 10.0, 0.0),
            })
            .collect();
        let clean = track[10].point;
        track[10].point = offset_point(&clean, 0.0, 50.0);
        let s = smooth(&track, 5).unwrap();
        assert!(haversine_m(&s[10].point, &clean) <= 10.0 + 1e-6);
        assert_eq!(s.len(), track.len());
        assert_eq!(s[0].ts, track[0].ts);
        assert_eq!(s[20].ts, track[20].ts);
    }

    #[test]
    fn all_stationary_is_one_poi() {
        let raw: Vec<LocationSample> = (0..200).map(|i| sample(i * 13, base())).collect();
        let seg = segment_user(&raw, &SegmentParams::default()).unwrap();
        assert_eq!(seg.pois.len(), 1);
        assert!(seg.trips.is_empty());
    }

    #[test]
    fn stay_move_stay_gives_one_trip() {
        let raw = stay_move_stay(8.0, 0);
        let seg = segment_user(&raw, &SegmentParams::default()).unwrap();
        assert_eq!(seg.pois.len(), 2);
        assert_eq!(seg.trips.len(), 1);
        let t = &seg.trips[0];
        assert!((t.duration_s - 600).abs() <= 13, "{}", t.duration_s);
        assert_eq!(t.origin.departure, t.departure_time);
        assert_eq!(t.destination.arrival, t.arrival_time);
        assert!((t.distance_m - 4800.0).abs() < 120.0, "{}", t.distance_m);
        assert_eq!(t.mode_source, ModeSource::SpeedStub);
        assert_eq!(t.segment_modes[0].0, Mode::Car);
    }

    #[test]
    fn lone_sample_outside_dwell_radius_keeps_boundaries() {
        let clean = segment_user(&stay_move_stay(8.0, 0), &SegmentParams::default()).unwrap();
        let mut raw = stay_move_stay(8.0, 0);
        // two samples before departure and two after arrival, 70 m off
        let dep = raw.iter().position(|s| s.ts - 1_000_000 > 1800).unwrap();
        let arr = raw.iter().position(|s| s.ts - 1_000_000 > 2400).unwrap();
        raw[dep - 2].point = offset_point(&raw[dep - 2].point, 0.0, 70.0);
        raw[arr + 1].point = offset_point(&raw[arr + 1].point, 0.0, 70.0);
        let seg = segment_user(&raw, &SegmentParams::default()).unwrap();
        assert_eq!(seg.trips.len(), 1);
        let (a, b) = (&clean.trips[0], &seg.trips[0]);
        assert!(
            (a.departure_time - b.departure_time).abs() <= 2,
            "{} {}",
            a.departure_time,
            b.departure_time
        );
        assert!(
            (a.arrival_time - b.arrival_time).abs() <= 2,
            "{} {}",
            a.arrival_time,
            b.arrival_time
        );
    }

    #[test]
    fn short_stop_does_not_split_trip() {
        let raw = stay_move_stay(8.0, 60);
        let seg = segment_user(&raw, &SegmentParams::default()).unwrap();
        assert_eq!(seg.trips.len(), 1);
        assert!((seg.trips[0].duration_s - 660).abs() <= 13);
    }

    #[test]
    fn rejects_non_monotonic() {
        let mut raw = stay_move_stay(8.0, 0);
        raw.swap(3, 4);
        assert!(matches!(
            segment_user(&raw, &SegmentParams::default()),
            Err(TraceError::MalformedTrack(_))
        ));
    }

    #[test]
    fn gap_splits_track() {
        // dwell at A, 20 h gap, dwell at B: no trip across the gap
        let mut raw: Vec<LocationSample> = (0..60).map(|i| sample(i * 13, base())).collect();
        let b = offset_point(&base(), 10_000.0, 0.0);
        raw.extend((0..60).map(|i| sample(72_000 + i * 13, b)));
        let seg = segment_user(&raw, &SegmentParams::default()).unwrap();
        assert_eq!(seg.pois.len(), 2);
        assert!(seg.trips.is_empty());
    }

    #[test]
    fn labelled_modes_are_accumulated() {
        let mut raw = stay_move_stay(8.0, 0);
        for s in raw.iter_mut() {
            s.mode = Some(if s.ts < 1_000_000 + 1800 + 300 {
                Mode::Bus
            } else {
                Mode::Metro
            });
        }
        let seg = segment_user(&raw, &SegmentParams::default()).unwrap();
        let t = &seg.trips[0];
        assert_eq!(t.mode_source, ModeSource::Labels);
        let sum: f64 = t.segment_modes.iter().map(|s| s.1).sum();
        assert!((sum - t.distance_m).abs() < 1e-6);
        assert_eq!(t.segment_modes.len(), 2);
    }
}
