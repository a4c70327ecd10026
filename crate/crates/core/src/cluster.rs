//! Grouping of comparable trips by home neighborhood, departure window,
//! destination school and transport mode.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_m, project_point, GeoError, GeoPoint, EARTH_RADIUS_M};
use crate::trace::{
    medoid_index, principal_mode, LocalClock, ModeClass, ModeGranularity, SchoolCatalog, Trip, UserId, UserProfile,
};

/// Default guard on the number of points given to the distance-rule method.
pub const DEFAULT_MAX_POINTS: usize = 50_000;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{n} points exceed the distance-rule capacity of {max}")]
    Capacity { n: usize, max: usize },
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Opaque spatial cluster id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocationId(pub String);

impl fmt::Display for LocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClusterMethod {
    #[serde(rename = "grid")]
    Grid,
    #[serde(rename = "distance-rule")]
    DistanceRule,
}

impl ClusterMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ClusterMethod::Grid => "grid",
            ClusterMethod::DistanceRule => "distance-rule",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "grid" => Some(ClusterMethod::Grid),
            "distance-rule" => Some(ClusterMethod::DistanceRule),
            _ => None,
        }
    }
}

fn check_radius(r: f64) -> Result<(), ClusterError> {
    if r.is_finite() && r > 0.0 {
        Ok(())
    } else {
        Err(ClusterError::InvalidParameter(format!(
            "cell size must be > 0, got {r}"
        )))
    }
}

/// Square grid over the bounding box of a point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// South-west corner of the bounding box.
    pub origin: GeoPoint,
    pub cell_size_m: f64,
}

impl GridSpec {
    pub fn fit(points: &[GeoPoint], cell_size_m: f64) -> Result<GridSpec, ClusterError> {
        check_radius(cell_size_m)?;
        let first = points
            .first()
            .ok_or_else(|| ClusterError::InvalidParameter("no points".into()))?;
        let mut origin = *first;
        for p in points {
            p.validate()?;
            origin.lat = origin.lat.min(p.lat);
            origin.lon = origin.lon.min(p.lon);
        }
        Ok(GridSpec { origin, cell_size_m })
    }

    /// Cell indices; points on a boundary belong to the cell with the larger index.
    pub fn cell_of(&self, p: &GeoPoint) -> (i64, i64) {
        let q = project_point(p, &self.origin);
        (
            (q.x / self.cell_size_m).floor() as i64,
            (q.y / self.cell_size_m).floor() as i64,
        )
    }

    pub fn location_id(&self, p: &GeoPoint) -> LocationId {
        let (ix, iy) = self.cell_of(p);
        LocationId(format!("g{ix}_{iy}"))
    }
}

/// Assign each point to its grid cell.
pub fn grid_assign(homes: &[GeoPoint], r: f64) -> Result<Vec<LocationId>, ClusterError> {
    let grid = GridSpec::fit(homes, r)?;
    Ok(homes.iter().map(|p| grid.location_id(p)).collect())
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }

    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = i;
        while self.0[c] != r {
            let next = self.0[c];
            self.0[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components of the "within r" graph, each sorted ascending.
fn proximity_components(points: &[GeoPoint], r: f64) -> Vec<Vec<usize>> {
    let max_abs_lat = points.iter().map(|p| p.lat.abs()).fold(0.0_f64, f64::max).min(89.0);
    let deg_per_m = 1.0 / (EARTH_RADIUS_M.to_radians());
    let cell_lat = r * deg_per_m;
    let cell_lon = r * deg_per_m / max_abs_lat.to_radians().cos();
    let key = |p: &GeoPoint| ((p.lat / cell_lat).floor() as i64, (p.lon / cell_lon).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(i);
    }
    let mut uf = UnionFind::new(points.len());
    for (i, p) in points.iter().enumerate() {
        let (ky, kx) = key(p);
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(cands) = buckets.get(&(ky + dy, kx + dx)) {
                    for &j in cands {
                        if j > i && haversine_m(p, &points[j]) <= r {
                            uf.union(i, j);
                        }
                    }
                }
            }
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..points.len() {
        let root = uf.find(i);
        comps.entry(root).or_default().push(i);
    }
    comps.into_values().collect()
}

/// Complete-linkage agglomeration of `points[idx]`, stopped before any merge
/// whose linkage exceeds `r`. Returns groups of global indices.
fn complete_linkage_cut(points: &[GeoPoint], idx: &[usize], r: f64) -> Vec<Vec<usize>> {
    let m = idx.len();
    if m == 1 {
        return vec![vec![idx[0]]];
    }
    let mut d = vec![0.0_f64; m * m];
    for a in 0..m {
        for b in a + 1..m {
            let v = haversine_m(&points[idx[a]], &points[idx[b]]);
            d[a * m + b] = v;
            d[b * m + a] = v;
        }
    }
    let mut active = vec![true; m];
    let mut members: Vec<Vec<usize>> = (0..m).map(|a| vec![idx[a]]).collect();
    let nearest = |d: &[f64], active: &[bool], a: usize| -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for b in 0..m {
            if b != a && active[b] && d[a * m + b] < best.1 {
                best = (b, d[a * m + b]);
            }
        }
        best
    };
    let mut nn: Vec<(usize, f64)> = (0..m).map(|a| nearest(&d, &active, a)).collect();

    loop {
        // closest pair; ties resolved by the smallest (low, high) index pair
        let mut pick: Option<(f64, usize, usize)> = None;
        for a in 0..m {
            if !active[a] || nn[a].0 == usize::MAX {
                continue;
            }
            let (lo, hi) = (a.min(nn[a].0), a.max(nn[a].0));
            let better = match pick {
                None => true,
                Some((dist, plo, phi)) => nn[a].1 < dist || (nn[a].1 == dist && (lo, hi) < (plo, phi)),
            };
            if better {
                pick = Some((nn[a].1, lo, hi));
            }
        }
        let Some((dist, keep, gone)) = pick else { break };
        if dist > r {
            break;
        }
        for k in 0..m {
            if active[k] && k != keep && k != gone {
                let v = d[keep * m + k].max(d[gone * m + k]);
                d[keep * m + k] = v;
                d[k * m + keep] = v;
            }
        }
        active[gone] = false;
        let moved = std::mem::take(&mut members[gone]);
        members[keep].extend(moved);
        for k in 0..m {
            if active[k] && (k == keep || nn[k].0 == keep || nn[k].0 == gone) {
                nn[k] = nearest(&d, &active, k);
            }
        }
    }
    members.into_iter().filter(|g| !g.is_empty()).collect()
}

/// Complete-linkage clustering cut so that every cluster's diameter is at most `r`.
///
/// Points farther than `r` from everything in a group can never join it, so
/// the linkage runs independently on each connected component of the
/// "within r" graph; the merges are the same as on the full matrix.
pub fn distance_rule_cluster(homes: &[GeoPoint], r: f64, max_points: usize) -> Result<Vec<LocationId>, ClusterError> {
    check_radius(r)?;
    if homes.len() > max_points {
        return Err(ClusterError::Capacity {
            n: homes.len(),
            max: max_points,
        });
    }
    for p in homes {
        p.validate()?;
    }
    let mut groups: Vec<Vec<usize>> = proximity_components(homes, r)
        .iter()
        .flat_map(|comp| complete_linkage_cut(homes, comp, r))
        .collect();
    for g in groups.iter_mut() {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| g[0]);
    let mut labels = vec![LocationId(String::new()); homes.len()];
    for (k, g) in groups.iter().enumerate() {
        for &i in g {
            labels[i] = LocationId(format!("d{k}"));
        }
    }
    Ok(labels)
}

pub fn assign_locations(
    method: ClusterMethod,
    homes: &[GeoPoint],
    r: f64,
    max_points: usize,
) -> Result<Vec<LocationId>, ClusterError> {
    if homes.is_empty() {
        return Ok(Vec::new());
    }
    match method {
        ClusterMethod::Grid => grid_assign(homes, r),
        ClusterMethod::DistanceRule => distance_rule_cluster(homes, r, max_points),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterKey {
    pub location: LocationId,
    /// Local day number.
    pub day: i64,
    pub window: i64,
    pub school: String,
    pub mode: ModeClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub key: ClusterKey,
    /// Indices into the trip slice the clusters were built from.
    pub members: Vec<usize>,
    pub centroid: GeoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterParams {
    pub method: ClusterMethod,
    pub r_m: f64,
    pub window_s: i64,
    pub granularity: ModeGranularity,
    #[serde(skip)]
    pub utc_offset_s: i64,
    pub max_points: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            method: ClusterMethod::Grid,
            r_m: 400.0,
            window_s: 1200,
            granularity: ModeGranularity::Binary,
            utc_offset_s: 8 * 3600,
            max_points: DEFAULT_MAX_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedTrip {
    pub trip_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterSet {
    /// Sorted by key.
    pub clusters: Vec<Cluster>,
    pub skipped: Vec<SkippedTrip>,
    /// Spatial cluster of each user's home.
    pub locations: BTreeMap<UserId, LocationId>,
}

/// Medoid of the member home locations; ties go to the lowest user id.
pub fn cluster_centroid(
    members: &[usize],
    trips: &[Trip],
    profiles: &BTreeMap<UserId, UserProfile>,
) -> Option<GeoPoint> {
    let mut homes: Vec<(&UserId, GeoPoint)> = members
        .iter()
        .filter_map(|&i| profiles.get(&trips[i].user).map(|p| (&p.user, p.home)))
        .collect();
    homes.sort_by(|a, b| a.0.cmp(b.0));
    if homes.is_empty() {
        return None;
    }
    let pts: Vec<GeoPoint> = homes.iter().map(|h| h.1).collect();
    Some(pts[medoid_index(&pts)])
}

/// Spatial location of every profiled user, computed on their home points.
pub fn locate_users(
    profiles: &BTreeMap<UserId, UserProfile>,
    method: ClusterMethod,
    r: f64,
    max_points: usize,
) -> Result<BTreeMap<UserId, LocationId>, ClusterError> {
    let users: Vec<&UserProfile> = profiles.values().collect();
    let homes: Vec<GeoPoint> = users.iter().map(|p| p.home).collect();
    let ids = assign_locations(method, &homes, r, max_points)?;
    Ok(users.iter().map(|p| p.user.clone()).zip(ids).collect())
}

/// Partition trips into clusters of comparable trips.
///
/// Trips whose user has no profile, or whose principal mode cannot be
/// determined, are skipped and reported.
pub fn build_clusters(
    trips: &[Trip],
    profiles: &BTreeMap<UserId, UserProfile>,
    catalog: Option<&SchoolCatalog>,
    params: &ClusterParams,
) -> Result<ClusterSet, ClusterError> {
    if params.window_s <= 0 {
        return Err(ClusterError::InvalidParameter("window must be > 0".into()));
    }
    let trip_users: BTreeMap<UserId, UserProfile> = trips
        .iter()
        .filter_map(|t| profiles.get(&t.user).map(|p| (t.user.clone(), p.clone())))
        .collect();
    let locations = locate_users(&trip_users, params.method, params.r_m, params.max_points)?;
    let clock = LocalClock::new(params.utc_offset_s);

    let mut groups: BTreeMap<ClusterKey, Vec<usize>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for (i, t) in trips.iter().enumerate() {
        let Some(profile) = trip_users.get(&t.user) else {
            skipped.push(SkippedTrip {
                trip_id: t.id(),
                reason: "no resolved profile".into(),
            });
            continue;
        };
        let mode = match principal_mode(t, params.granularity) {
            Ok(m) => m,
            Err(e) => {
                skipped.push(SkippedTrip {
                    trip_id: t.id(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let school = catalog
            .and_then(|c| c.destination_id(&profile.school_id))
            .unwrap_or(&profile.school_id)
            .to_string();
        let key = ClusterKey {
            location: locations[&t.user].clone(),
            day: clock.day(t.departure_time),
            window: clock.seconds_of_day(t.departure_time) / params.window_s,
            school,
            mode,
        };
        groups.entry(key).or_default().push(i);
    }
    let clusters = groups
        .into_iter()
        .map(|(key, members)| {
            let centroid = cluster_centroid(&members, trips, &trip_users).expect("members all have profiles");
            Cluster { key, members, centroid }
        })
        .collect();
    Ok(ClusterSet {
        clusters,
        skipped,
        locations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::offset_point;
    use crate::trace::{Mode, ModeSource, PointOfInterest};

    fn base() -> GeoPoint {
        GeoPoint::new(1.35, 103.8).unwrap()
    }

    #[test]
    fn grid_examples() {
        assert_eq!(grid_assign(&[base()], 400.0).unwrap().len(), 1);
        // both interior to the first cell
        let a = offset_point(&base(), 150.0, 150.0);
        let b = offset_point(&a, 100.0, 0.0);
        let ids = grid_assign(&[base(), a, b], 400.0).unwrap();
        assert_eq!(ids[1], ids[2]);
        // 401 m apart straddling the x = 400 boundary
        let c = offset_point(&base(), 399.5, 10.0);
        let d = offset_point(&c, 401.0, 0.0);
        let ids = grid_assign(&[base(), c, d], 400.0).unwrap();
        assert_ne!(ids[1], ids[2]);
        assert!(grid_assign(&[base()], 0.0).is_err());
    }

    #[test]
    fn distance_rule_examples() {
        let same = vec![base(); 5];
        let ids = distance_rule_cluster(&same, 400.0, DEFAULT_MAX_POINTS).unwrap();
        assert!(ids.iter().all(|i| *i == ids[0]));

        let line: Vec<GeoPoint> = [0.0, 300.0, 600.0]
            .iter()
            .map(|x| offset_point(&base(), *x, 0.0))
            .collect();
        let ids = distance_rule_cluster(&line, 400.0, DEFAULT_MAX_POINTS).unwrap();
        assert_eq!(ids[0], ids[1]);
        assert_ne!(ids[1], ids[2]);

        let mut blobs = Vec::new();
        for k in 0..10 {
            let ang = k as f64;
            blobs.push(offset_point(&base(), 40.0 * ang.cos(), 40.0 * ang.sin()));
            let far = offset_point(&base(), 5000.0, 0.0);
            blobs.push(offset_point(&far, 40.0 * ang.cos(), 40.0 * ang.sin()));
        }
        let ids = distance_rule_cluster(&blobs, 400.0, DEFAULT_MAX_POINTS).unwrap();
        let distinct: std::collections::BTreeSet<_> = ids.iter().collect();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn distance_rule_capacity_guard() {
        let pts = vec![base(); 11];
        assert!(matches!(
            distance_rule_cluster(&pts, 400.0, 10),
            Err(ClusterError::Capacity { n: 11, max: 10 })
        ));
    }

    fn trip(user: &str, depart_local: i64) -> Trip {
        // 2016-03-01 00:00 +08:00
        let ts = 1_456_761_600 + depart_local;
        let p = base();
        let poi = PointOfInterest {
            location: p,
            arrival: ts - 600,
            departure: ts,
        };
        Trip {
            user: UserId::from(user),
            origin: poi,
            destination: poi,
            departure_time: ts,
            arrival_time: ts + 900,
            path: vec![],
            duration_s: 900,
            distance_m: 5000.0,
            segment_modes: vec![(Mode::Car, 5000.0)],
            mode_source: ModeSource::Labels,
        }
    }

    fn profiles(users: &[&str]) -> BTreeMap<UserId, UserProfile> {
        users
            .iter()
            .enumerate()
            .map(|(i, u)| {
                (
                    UserId::from(*u),
                    UserProfile {
                        user: UserId::from(*u),
                        home: offset_point(&base(), 20.0 * i as f64, 0.0),
                        school_id: "S".into(),
                        school_location: offset_point(&base(), 9000.0, 0.0),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn window_arithmetic() {
        let prof = profiles(&["a", "b"]);
        let params = ClusterParams::default();
        let t = |h: i64, m: i64| h * 3600 + m * 60;
        let same = build_clusters(&[trip("a", t(7, 5)), trip("b", t(7, 15))], &prof, None, &params).unwrap();
        assert_eq!(same.clusters.len(), 1);
        assert_eq!(same.clusters[0].key.window, 21);
        let split = build_clusters(&[trip("a", t(7, 15)), trip("b", t(7, 25))], &prof, None, &params).unwrap();
        assert_eq!(split.clusters.len(), 2);
        let one = build_clusters(&[trip("a", t(7, 5))], &prof, None, &params).unwrap();
        assert_eq!(one.clusters.len(), 1);
        assert_eq!(one.clusters[0].members, vec![0]);
    }

    #[test]
    fn missing_profile_is_skipped() {
        let prof = profiles(&["a"]);
        let set = build_clusters(
            &[trip("a", 25_000), trip("zz", 25_000)],
            &prof,
            None,
            &ClusterParams::default(),
        )
        .unwrap();
        assert_eq!(set.clusters.len(), 1);
        assert_eq!(set.skipped.len(), 1);
        assert_eq!(set.skipped[0].trip_id, trip("zz", 25_000).id());
    }

    #[test]
    fn centroid_tie_and_singleton() {
        let prof = profiles(&["b", "a"]);
        let trips = vec![trip("b", 25_000), trip("a", 25_000)];
        // two points: both minimize the sum; lower user id wins
        let c = cluster_centroid(&[0, 1], &trips, &prof).unwrap();
        assert_eq!(c, prof[&UserId::from("a")].home);
        let c = cluster_centroid(&[0], &trips, &prof).unwrap();
        assert_eq!(c, prof[&UserId::from("b")].home);
    }

    #[test]
    fn centroid_of_triangle_with_center() {
        let center = base();
        let r = 300.0 / 3f64.sqrt();
        let mut homes: Vec<GeoPoint> = (0..3)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / 3.0;
                offset_point(&center, r * a.cos(), r * a.sin())
            })
            .collect();
        homes.push(center);
        let users = ["a", "b", "c", "d"];
        let prof: BTreeMap<UserId, UserProfile> = users
            .iter()
            .zip(&homes)
            .map(|(u, h)| {
                let p = UserProfile {
                    user: UserId::from(*u),
                    home: *h,
                    school_id: "S".into(),
                    school_location: *h,
                };
                (p.user.clone(), p)
            })
            .collect();
        let trips: Vec<Trip> = users.iter().map(|u| trip(u, 25_000)).collect();
        assert_eq!(cluster_centroid(&[0, 1, 2, 3], &trips, &prof), Some(center));
    }
}
