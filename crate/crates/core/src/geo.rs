//! Geodesic and planar geometry shared by the trace-facing modules.
//!
//! Distances use a spherical earth. Areas are computed in a local
//! equirectangular chart, which is accurate enough for city-scale trips.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Points farther than this from the chart origin are rejected by [`project_local`].
pub const MAX_CHART_RADIUS_M: f64 = 100_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate lat={lat} lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("point lies {distance_m:.0} m from the chart origin (limit {limit_m:.0} m)")]
    OutOfChart { distance_m: f64, limit_m: f64 },
    #[error("degenerate trip: {0}")]
    DegenerateTrip(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Latitude/longitude in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let ok = self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon);
        if ok {
            Ok(())
        } else {
            Err(GeoError::InvalidCoordinate {
                lat: self.lat,
                lon: self.lon,
            })
        }
    }

    /// Unchecked great-circle distance in meters.
    pub fn distance_to(&self, other: &GeoPoint) -> f64 {
        haversine_m(self, other)
    }
}

/// Position in meters east (`x`) and north (`y`) of a chart origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPoint {
    pub x: f64,
    pub y: f64,
}

impl PlanarPoint {
    pub fn new(x: f64, y: f64) -> Self {
        PlanarPoint { x, y }
    }

    pub fn dist(&self, other: &PlanarPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A non-empty ordered sequence of validated points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    points: Vec<GeoPoint>,
}

impl Polyline {
    pub fn new(points: Vec<GeoPoint>) -> Result<Self, GeoError> {
        if points.is_empty() {
            return Err(GeoError::DegenerateTrip("empty polyline".into()));
        }
        for p in &points {
            p.validate()?;
        }
        Ok(Polyline { points })
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> GeoPoint {
        self.points[0]
    }

    pub fn last(&self) -> GeoPoint {
        self.points[self.points.len() - 1]
    }

    /// Sum of great-circle edge lengths in meters.
    pub fn length_m(&self) -> f64 {
        self.points.windows(2).map(|w| haversine_m(&w[0], &w[1])).sum()
    }

    pub fn reversed(&self) -> Polyline {
        let mut points = self.points.clone();
        points.reverse();
        Polyline { points }
    }

    /// Translate every point by `east_m`/`north_m` meters, measured at each point.
    pub fn translated(&self, east_m: f64, north_m: f64) -> Result<Polyline, GeoError> {
        let points = self.points.iter().map(|p| offset_point(p, east_m, north_m)).collect();
        Polyline::new(points)
    }

    /// Midpoint of the two endpoints in coordinate space.
    pub fn endpoint_midpoint(&self) -> GeoPoint {
        let (a, b) = (self.first(), self.last());
        GeoPoint {
            lat: (a.lat + b.lat) / 2.0,
            lon: (a.lon + b.lon) / 2.0,
        }
    }
}

pub(crate) fn haversine_m(p: &GeoPoint, q: &GeoPoint) -> f64 {
    if p == q {
        return 0.0;
    }
    let (lat1, lat2) = (p.lat.to_radians(), q.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (q.lon - p.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn geodesic_distance(p: &GeoPoint, q: &GeoPoint) -> Result<f64, GeoError> {
    p.validate()?;
    q.validate()?;
    Ok(haversine_m(p, q))
}

/// Shift a point by a metric offset using the local tangent plane at that point.
pub fn offset_point(p: &GeoPoint, east_m: f64, north_m: f64) -> GeoPoint {
    let dlat = (north_m / EARTH_RADIUS_M).to_degrees();
    let dlon = (east_m / (EARTH_RADIUS_M * p.lat.to_radians().cos())).to_degrees();
    GeoPoint {
        lat: p.lat + dlat,
        lon: p.lon + dlon,
    }
}

fn wrap_lon_deg(d: f64) -> f64 {
    let mut d = d;
    while d > 180.0 {
        d -= 360.0;
    }
    while d < -180.0 {
        d += 360.0;
    }
    d
}

/// Equirectangular projection around `origin`.
pub fn project_point(p: &GeoPoint, origin: &GeoPoint) -> PlanarPoint {
    let k = EARTH_RADIUS_M * origin.lat.to_radians().cos();
    PlanarPoint {
        x: k * wrap_lon_deg(p.lon - origin.lon).to_radians(),
        y: EARTH_RADIUS_M * (p.lat - origin.lat).to_radians(),
    }
}

/// Inverse of [`project_point`].
pub fn unproject_point(p: &PlanarPoint, origin: &GeoPoint) -> GeoPoint {
    let k = EARTH_RADIUS_M * origin.lat.to_radians().cos();
    GeoPoint {
        lat: origin.lat + (p.y / EARTH_RADIUS_M).to_degrees(),
        lon: wrap_lon_deg(origin.lon + (p.x / k).to_degrees()),
    }
}

/// Project a sequence into the local chart anchored at `origin`.
pub fn project_local(points: &[GeoPoint], origin: &GeoPoint) -> Result<Vec<PlanarPoint>, GeoError> {
    origin.validate()?;
    points
        .iter()
        .map(|p| {
            p.validate()?;
            let d = haversine_m(p, origin);
            if d > MAX_CHART_RADIUS_M {
                return Err(GeoError::OutOfChart {
                    distance_m: d,
                    limit_m: MAX_CHART_RADIUS_M,
                });
            }
            Ok(project_point(p, origin))
        })
        .collect()
}

fn dedup_consecutive(points: &[PlanarPoint]) -> Vec<PlanarPoint> {
    let mut out: Vec<PlanarPoint> = Vec::with_capacity(points.len());
    for p in points {
        if out.last() != Some(p) {
            out.push(*p);
        }
    }
    out
}

fn dedup_cyclic(points: &[PlanarPoint]) -> Vec<PlanarPoint> {
    let mut out = dedup_consecutive(points);
    while out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    out
}

fn cmp_point(a: &PlanarPoint, b: &PlanarPoint) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// Rotate and orient a cyclic vertex sequence into a canonical form, so that
/// every rotation or reversal of the same polygon yields identical input to the
/// area routines.
fn canonical_cycle(points: &[PlanarPoint]) -> Vec<PlanarPoint> {
    let n = points.len();
    let min = points.iter().copied().min_by(cmp_point).expect("non-empty cycle");
    let mut best: Option<Vec<PlanarPoint>> = None;
    for start in (0..n).filter(|&i| points[i] == min) {
        for forward in [true, false] {
            let cand: Vec<PlanarPoint> = (0..n)
                .map(|k| {
                    let idx = if forward { (start + k) % n } else { (start + n - k) % n };
                    points[idx]
                })
                .collect();
            let better = match &best {
                None => true,
                Some(b) => {
                    cand.iter()
                        .zip(b.iter())
                        .map(|(x, y)| cmp_point(x, y))
                        .find(|o| o.is_ne())
                        == Some(std::cmp::Ordering::Less)
                }
            };
            if better {
                best = Some(cand);
            }
        }
    }
    best.expect("at least one candidate")
}

fn shoelace_signed(points: &[PlanarPoint]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let o = points[0];
    let mut acc = 0.0;
    for i in 0..points.len() {
        let p = points[i];
        let q = points[(i + 1) % points.len()];
        acc += (p.x - o.x) * (q.y - o.y) - (q.x - o.x) * (p.y - o.y);
    }
    acc / 2.0
}

/// Proper crossing of segments `p1-p2` and `p3-p4`: returns the parameters
/// along each segment, both strictly inside (0, 1).
fn segment_crossing(p1: PlanarPoint, p2: PlanarPoint, p3: PlanarPoint, p4: PlanarPoint) -> Option<(f64, f64)> {
    let (rx, ry) = (p2.x - p1.x, p2.y - p1.y);
    let (sx, sy) = (p4.x - p3.x, p4.y - p3.y);
    let denom = rx * sy - ry * sx;
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    let (qx, qy) = (p3.x - p1.x, p3.y - p1.y);
    let t = (qx * sy - qy * sx) / denom;
    let u = (qx * ry - qy * rx) / denom;
    const EPS: f64 = 1e-12;
    if t > EPS && t < 1.0 - EPS && u > EPS && u < 1.0 - EPS {
        Some((t, u))
    } else {
        None
    }
}

fn point_key(p: &PlanarPoint) -> (u64, u64) {
    // +0.0 folds -0.0 into 0.0
    ((p.x + 0.0).to_bits(), (p.y + 0.0).to_bits())
}

/// Split a closed vertex cycle at its self-crossings and return the simple loops.
fn split_into_loops(cycle: &[PlanarPoint]) -> Vec<Vec<PlanarPoint>> {
    let n = cycle.len();
    // edge i runs cycle[i] -> cycle[(i+1) % n]
    let mut inserts: Vec<Vec<(f64, PlanarPoint)>> = vec![Vec::new(); n];
    let mut order: Vec<usize> = (0..n).collect();
    let min_x = |i: usize| cycle[i].x.min(cycle[(i + 1) % n].x);
    let max_x = |i: usize| cycle[i].x.max(cycle[(i + 1) % n].x);
    order.sort_by(|&a, &b| min_x(a).total_cmp(&min_x(b)).then(a.cmp(&b)));
    for (pos, &i) in order.iter().enumerate() {
        let hi = max_x(i);
        for &j in &order[pos + 1..] {
            if min_x(j) > hi {
                break;
            }
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            if b == a + 1 || (a == 0 && b == n - 1) {
                continue;
            }
            let (a1, a2) = (cycle[a], cycle[(a + 1) % n]);
            let (b1, b2) = (cycle[b], cycle[(b + 1) % n]);
            if a1.y.max(a2.y) < b1.y.min(b2.y) || b1.y.max(b2.y) < a1.y.min(a2.y) {
                continue;
            }
            if let Some((t, u)) = segment_crossing(a1, a2, b1, b2) {
                let x = PlanarPoint::new(a1.x + t * (a2.x - a1.x), a1.y + t * (a2.y - a1.y));
                inserts[a].push((t, x));
                inserts[b].push((u, x));
            }
        }
    }

    let mut walk: Vec<PlanarPoint> = Vec::with_capacity(n);
    for (i, extra) in inserts.iter_mut().enumerate() {
        walk.push(cycle[i]);
        extra.sort_by(|a, b| a.0.total_cmp(&b.0));
        walk.extend(extra.iter().map(|e| e.1));
    }

    let mut loops = Vec::new();
    let mut stack: Vec<PlanarPoint> = Vec::with_capacity(walk.len());
    let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
    for p in walk {
        let key = point_key(&p);
        if let Some(&pos) = seen.get(&key) {
            let lp: Vec<PlanarPoint> = stack[pos..].to_vec();
            for q in &stack[pos + 1..] {
                seen.remove(&point_key(q));
            }
            stack.truncate(pos + 1);
            if lp.len() >= 3 {
                loops.push(lp);
            }
        } else {
            seen.insert(key, stack.len());
            stack.push(p);
        }
    }
    if stack.len() >= 3 {
        loops.push(stack);
    }
    loops
}

/// Area of a closed, possibly self-intersecting polygon.
///
/// The polygon is split at its self-crossings into simple loops and the
/// absolute loop areas are summed, so the two lobes of a figure-eight add up
/// instead of cancelling. Fewer than three distinct vertices give 0.
pub fn polygon_area(points: &[PlanarPoint]) -> f64 {
    let cycle = dedup_cyclic(points);
    if cycle.len() < 3 {
        return 0.0;
    }
    let cycle = canonical_cycle(&cycle);
    split_into_loops(&cycle).iter().map(|l| shoelace_signed(l).abs()).sum()
}

/// Shared chart origin for a pair of routes. Built from both routes so the
/// result does not depend on argument order.
fn pair_origin(a: &Polyline, b: &Polyline) -> GeoPoint {
    let (ma, mb) = (a.endpoint_midpoint(), b.endpoint_midpoint());
    GeoPoint {
        lat: (ma.lat + mb.lat) / 2.0,
        lon: (ma.lon + mb.lon) / 2.0,
    }
}

/// Area in m² between two routes: the polygon made of `a` forward followed by `b` reversed.
pub fn enclosed_area(a: &Polyline, b: &Polyline) -> Result<f64, GeoError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(GeoError::DegenerateTrip(format!(
            "routes need at least 2 points (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let origin = pair_origin(a, b);
    let mut ring = project_local(a.points(), &origin)?;
    let mut pb = project_local(b.points(), &origin)?;
    pb.reverse();
    ring.extend(pb);
    Ok(polygon_area(&ring))
}

fn planar_path_length(points: &[PlanarPoint]) -> f64 {
    points.windows(2).map(|w| w[0].dist(&w[1])).sum()
}

fn unit_normal(a: PlanarPoint, b: PlanarPoint) -> (f64, f64) {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len = dx.hypot(dy);
    (-dy / len, dx / len)
}

/// Outline of the band of total width `w` around a planar path.
///
/// Edges are offset by `w/2` on each side and joined with mitres; a mitre
/// longer than `2w` falls back to a bevel on both sides. Ends are flat.
/// The returned ring is the left offset chain followed by the right offset
/// chain in reverse.
pub fn band_outline(path: &[PlanarPoint], w: f64) -> Result<Vec<PlanarPoint>, GeoError> {
    if !(w.is_finite() && w > 0.0) {
        return Err(GeoError::InvalidParameter(format!("band width must be > 0, got {w}")));
    }
    let pts = dedup_consecutive(path);
    if pts.len() < 2 {
        return Err(GeoError::DegenerateTrip("path has zero length".into()));
    }
    let h = w / 2.0;
    let miter_limit = 2.0 * w;
    let n = pts.len();
    let mut left = Vec::with_capacity(n + 4);
    let mut right = Vec::with_capacity(n + 4);
    for i in 0..n {
        let p = pts[i];
        if i == 0 || i == n - 1 {
            let (nx, ny) = if i == 0 {
                unit_normal(pts[0], pts[1])
            } else {
                unit_normal(pts[n - 2], pts[n - 1])
            };
            left.push(PlanarPoint::new(p.x + h * nx, p.y + h * ny));
            right.push(PlanarPoint::new(p.x - h * nx, p.y - h * ny));
            continue;
        }
        let n1 = unit_normal(pts[i - 1], p);
        let n2 = unit_normal(p, pts[i + 1]);
        let (sx, sy) = (n1.0 + n2.0, n1.1 + n2.1);
        let s = sx.hypot(sy);
        // cos of half the turning angle
        let cos_half = s / 2.0;
        let miter_len = if cos_half > 1e-12 { h / cos_half } else { f64::INFINITY };
        if miter_len <= miter_limit {
            let (mx, my) = (sx / s * miter_len, sy / s * miter_len);
            left.push(PlanarPoint::new(p.x + mx, p.y + my));
            right.push(PlanarPoint::new(p.x - mx, p.y - my));
        } else {
            left.push(PlanarPoint::new(p.x + h * n1.0, p.y + h * n1.1));
            left.push(PlanarPoint::new(p.x + h * n2.0, p.y + h * n2.1));
            right.push(PlanarPoint::new(p.x - h * n1.0, p.y - h * n1.1));
            right.push(PlanarPoint::new(p.x - h * n2.0, p.y - h * n2.1));
        }
    }
    right.reverse();
    left.extend(right);
    Ok(left)
}

/// Area in m² of the width-`w` band around a route (see [`band_outline`]).
///
/// The band is measured by the winding-weighted area of its outline, so a
/// stretch of road traversed twice counts twice. Mitre corrections on the
/// two sides cancel, which makes the result `w` times the path length.
pub fn outer_contour_area(a: &Polyline, w: f64) -> Result<f64, GeoError> {
    if !(w.is_finite() && w > 0.0) {
        return Err(GeoError::InvalidParameter(format!("band width must be > 0, got {w}")));
    }
    if a.len() < 2 {
        return Err(GeoError::DegenerateTrip("route needs at least 2 points".into()));
    }
    let planar = project_local(a.points(), &a.endpoint_midpoint())?;
    if planar_path_length(&planar) <= 0.0 {
        return Err(GeoError::DegenerateTrip("route has zero length".into()));
    }
    let ring = band_outline(&planar, w)?;
    Ok(shoelace_signed(&ring).abs())
}

/// Insert interpolated points so no edge is longer than `max_spacing_m`.
pub fn resample(a: &Polyline, max_spacing_m: f64) -> Polyline {
    if !(max_spacing_m > 0.0) || a.len() < 2 {
        return a.clone();
    }
    let pts = a.points();
    let mut out = Vec::with_capacity(pts.len());
    out.push(pts[0]);
    for w in pts.windows(2) {
        let d = haversine_m(&w[0], &w[1]);
        let k = (d / max_spacing_m).ceil() as usize;
        for s in 1..k {
            let f = s as f64 / k as f64;
            out.push(GeoPoint {
                lat: w[0].lat + f * (w[1].lat - w[0].lat),
                lon: w[0].lon + f * (w[1].lon - w[0].lon),
            });
        }
        out.push(w[1]);
    }
    Polyline { points: out }
}
