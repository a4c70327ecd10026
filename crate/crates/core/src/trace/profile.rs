use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{LocalClock, LocationSample, TraceError, Trip, UserId};
use crate::geo::{haversine_m, GeoPoint};

/// Index of the point minimizing the summed great-circle distance to all
/// others. Ties go to the lowest index.
pub fn medoid_index(points: &[GeoPoint]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let mut sum = 0.0;
        for q in points {
            sum += haversine_m(p, q);
            if sum >= best.1 {
                break;
            }
        }
        if sum < best.1 {
            best = (i, sum);
        }
    }
    best.0
}

const PROFILE_MEDOID_CAP: usize = 600;

fn capped_medoid(points: &[GeoPoint]) -> GeoPoint {
    let n = points.len();
    if n <= PROFILE_MEDOID_CAP {
        return points[medoid_index(points)];
    }
    let sub: Vec<GeoPoint> = (0..PROFILE_MEDOID_CAP)
        .map(|i| points[i * (n - 1) / (PROFILE_MEDOID_CAP - 1)])
        .collect();
    sub[medoid_index(&sub)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct School {
    pub id: String,
    pub location: GeoPoint,
}

/// School catalog with co-located entries merged into one destination.
#[derive(Debug, Clone, PartialEq)]
pub struct SchoolCatalog {
    schools: Vec<School>,
    destination: BTreeMap<String, String>,
}

impl SchoolCatalog {
    /// Schools within `merge_radius_m` of each other (transitively) share the
    /// destination id of the group's lexicographically smallest member.
    pub fn new(schools: Vec<School>, merge_radius_m: f64) -> Self {
        let n = schools.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], i: usize) -> usize {
            let mut r = i;
            while parent[r] != r {
                r = parent[r];
            }
            let mut c = i;
            while parent[c] != r {
                let next = parent[c];
                parent[c] = r;
                c = next;
            }
            r
        }
        for i in 0..n {
            for j in i + 1..n {
                if haversine_m(&schools[i].location, &schools[j].location) <= merge_radius_m {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut group_name: BTreeMap<usize, String> = BTreeMap::new();
        for (i, school) in schools.iter().enumerate() {
            let r = find(&mut parent, i);
            let e = group_name.entry(r).or_insert_with(|| school.id.clone());
            if school.id < *e {
                *e = school.id.clone();
            }
        }
        let destination = (0..n)
            .map(|i| {
                let r = find(&mut parent, i);
                (schools[i].id.clone(), group_name[&r].clone())
            })
            .collect();
        SchoolCatalog { schools, destination }
    }

    pub fn schools(&self) -> &[School] {
        &self.schools
    }

    pub fn get(&self, id: &str) -> Option<&School> {
        self.schools.iter().find(|s| s.id == id)
    }

    /// Merged destination id for a school id.
    pub fn destination_id(&self, id: &str) -> Option<&str> {
        self.destination.get(id).map(String::as_str)
    }

    /// Nearest school and its distance; ties go to the earlier catalog entry.
    pub fn nearest(&self, p: &GeoPoint) -> Option<(&School, f64)> {
        let mut best: Option<(&School, f64)> = None;
        for s in &self.schools {
            let d = haversine_m(p, &s.location);
            if best.is_none_or(|b| d < b.1) {
                best = Some((s, d));
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user: UserId,
    pub home: GeoPoint,
    pub school_id: String,
    pub school_location: GeoPoint,
}

/// In configuration files the UTC offset is set once at the top level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileParams {
    #[serde(skip)]
    pub utc_offset_s: i64,
    /// Night window, local seconds of day; wraps past midnight.
    pub night_start_s: i64,
    pub night_end_s: i64,
    /// School window on weekdays, local seconds of day.
    pub school_start_s: i64,
    pub school_end_s: i64,
    pub min_samples: usize,
    pub school_radius_m: f64,
}

impl Default for ProfileParams {
    fn default() -> Self {
        ProfileParams {
            utc_offset_s: 8 * 3600,
            night_start_s: 22 * 3600,
            night_end_s: 5 * 3600,
            school_start_s: 9 * 3600,
            school_end_s: 12 * 3600,
            min_samples: 10,
            school_radius_m: 500.0,
        }
    }
}

/// Home is the medoid of night samples; the school is the catalog entry
/// nearest the medoid of weekday school-hours samples, if within range.
pub fn infer_home_school(
    samples: &[LocationSample],
    catalog: &SchoolCatalog,
    params: &ProfileParams,
) -> Result<UserProfile, TraceError> {
    let user = samples
        .first()
        .map(|s| s.user.clone())
        .unwrap_or_else(|| UserId(String::new()));
    let fail = |reason: String| TraceError::UnresolvableProfile {
        user: user.clone(),
        reason,
    };
    let clock = LocalClock::new(params.utc_offset_s);
    let mut night = Vec::new();
    let mut school = Vec::new();
    for s in samples {
        let sod = clock.seconds_of_day(s.ts);
        let in_night = if params.night_start_s > params.night_end_s {
            sod >= params.night_start_s || sod < params.night_end_s
        } else {
            sod >= params.night_start_s && sod < params.night_end_s
        };
        if in_night {
            night.push(s.point);
        }
        if clock.weekday(s.ts) < 5 && sod >= params.school_start_s && sod < params.school_end_s {
            school.push(s.point);
        }
    }
    if night.len() < params.min_samples {
        return Err(fail(format!("{} night samples", night.len())));
    }
    if school.len() < params.min_samples {
        return Err(fail(format!("{} school-hours samples", school.len())));
    }
    let home = capped_medoid(&night);
    let school_medoid = capped_medoid(&school);
    let (nearest, d) = catalog
        .nearest(&school_medoid)
        .ok_or_else(|| fail("empty school catalog".into()))?;
    if d > params.school_radius_m {
        return Err(fail(format!("nearest school {} is {d:.0} m away", nearest.id)));
    }
    Ok(UserProfile {
        user,
        home,
        school_id: nearest.id.clone(),
        school_location: nearest.location,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorningWindow {
    #[serde(skip)]
    pub utc_offset_s: i64,
    pub start_s: i64,
    pub end_s: i64,
    pub school_radius_m: f64,
}

impl Default for MorningWindow {
    fn default() -> Self {
        MorningWindow {
            utc_offset_s: 8 * 3600,
            start_s: 5 * 3600,
            end_s: 10 * 3600,
            school_radius_m: 500.0,
        }
    }
}

/// First trip per user and local day that departs inside the morning window
/// and ends near the user's school. Output is ordered by (user, departure).
pub fn select_morning_trips(
    trips: &[Trip],
    profiles: &BTreeMap<UserId, UserProfile>,
    window: &MorningWindow,
) -> Vec<Trip> {
    let clock = LocalClock::new(window.utc_offset_s);
    let mut sorted: Vec<&Trip> = trips.iter().collect();
    sorted.sort_by(|a, b| a.user.cmp(&b.user).then(a.departure_time.cmp(&b.departure_time)));
    let mut taken: BTreeSet<(UserId, i64)> = BTreeSet::new();
    let mut out = Vec::new();
    for t in sorted {
        let Some(profile) = profiles.get(&t.user) else {
            continue;
        };
        let sod = clock.seconds_of_day(t.departure_time);
        if sod < window.start_s || sod >= window.end_s {
            continue;
        }
        if haversine_m(&t.destination.location, &profile.school_location) > window.school_radius_m {
            continue;
        }
        if taken.insert((t.user.clone(), clock.day(t.departure_time))) {
            out.push(t.clone());
        }
    }
    out
}
