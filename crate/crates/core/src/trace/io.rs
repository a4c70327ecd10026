//! Wire formats: location samples (JSON Lines), school catalog (CSV),
//! trips (JSON Lines) and user profiles (CSV).
//!
//! Trip records, one JSON object per line, with fields in this order:
//!
//! | field            | type                                   |
//! |------------------|----------------------------------------|
//! | `trip_id`        | string, `user@departure_time`          |
//! | `user`           | string                                 |
//! | `departure_time` | integer, epoch seconds                 |
//! | `arrival_time`   | integer, epoch seconds                 |
//! | `duration_s`     | integer                                |
//! | `distance_m`     | number                                 |
//! | `origin`         | `{lat, lon, arrival, departure}`       |
//! | `destination`    | `{lat, lon, arrival, departure}`       |
//! | `segment_modes`  | array of `{mode, distance_m}`          |
//! | `mode_source`    | `labels` or `speed_stub`               |
//! | `path`           | array of `[lat, lon, ts]`              |

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{LocationSample, Mode, ModeSource, PointOfInterest, School, TrackPoint, Trip, UserId, UserProfile};
use crate::geo::GeoPoint;
use crate::parse::ParseError;
use crate::stats::{round_coord, sig6};

#[derive(Debug, Serialize, Deserialize)]
struct SampleWire {
    user: String,
    ts: i64,
    lat: f64,
    lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
}

fn checked_point(lat: f64, lon: f64, line: usize) -> Result<GeoPoint, ParseError> {
    GeoPoint::new(lat, lon).map_err(|e| ParseError::new(line, e.to_string()))
}

/// Parse JSON Lines location samples. Blank lines are skipped.
pub fn parse_samples(text: &str) -> Result<Vec<LocationSample>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let w: SampleWire = serde_json::from_str(line).map_err(|e| ParseError::new(ln, e.to_string()))?;
        let mode = match w.mode.as_deref() {
            None | Some("") => None,
            Some(m) => Some(Mode::parse(m).ok_or_else(|| ParseError::new(ln, format!("unknown mode {m:?}")))?),
        };
        out.push(LocationSample {
            user: UserId(w.user),
            ts: w.ts,
            point: checked_point(w.lat, w.lon, ln)?,
            mode,
        });
    }
    Ok(out)
}

pub fn write_samples<W: Write>(mut w: W, samples: &[LocationSample]) -> std::io::Result<()> {
    for s in samples {
        let wire = SampleWire {
            user: s.user.0.clone(),
            ts: s.ts,
            lat: round_coord(s.point.lat),
            lon: round_coord(s.point.lon),
            mode: s.mode.map(|m| m.as_str().to_string()),
        };
        serde_json::to_writer(&mut w, &wire)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Group samples per user, sorted by time, keeping the first sample of any
/// repeated timestamp.
pub fn group_by_user(samples: Vec<LocationSample>) -> BTreeMap<UserId, Vec<LocationSample>> {
    let mut map: BTreeMap<UserId, Vec<LocationSample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.user.clone()).or_default().push(s);
    }
    for v in map.values_mut() {
        v.sort_by_key(|s| s.ts);
        v.dedup_by_key(|s| s.ts);
    }
    map
}

#[derive(Debug, Serialize, Deserialize)]
struct SchoolRow {
    school_id: String,
    lat: f64,
    lon: f64,
}

/// Parse the `school_id,lat,lon` catalog.
pub fn parse_school_catalog(text: &str) -> Result<Vec<School>, ParseError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| ParseError::new(1, e.to_string()))?.clone();
    for col in ["school_id", "lat", "lon"] {
        if !headers.iter().any(|h| h == col) {
            return Err(ParseError::new(1, format!("missing column {col}")));
        }
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<SchoolRow>().enumerate() {
        let ln = i + 2;
        let row = row.map_err(|e| ParseError::new(ln, e.to_string()))?;
        if row.school_id.is_empty() {
            return Err(ParseError::new(ln, "empty school_id"));
        }
        out.push(School {
            id: row.school_id,
            location: checked_point(row.lat, row.lon, ln)?,
        });
    }
    Ok(out)
}

pub fn write_school_catalog<W: Write>(w: W, schools: &[School]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in schools {
        wtr.serialize(SchoolRow {
            school_id: s.id.clone(),
            lat: round_coord(s.location.lat),
            lon: round_coord(s.location.lon),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PoiWire {
    lat: f64,
    lon: f64,
    arrival: i64,
    departure: i64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentWire {
    mode: String,
    distance_m: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TripWire {
    trip_id: String,
    user: String,
    departure_time: i64,
    arrival_time: i64,
    duration_s: i64,
    distance_m: f64,
    origin: PoiWire,
    destination: PoiWire,
    segment_modes: Vec<SegmentWire>,
    mode_source: ModeSource,
    path: Vec<(f64, f64, i64)>,
}

fn poi_wire(p: &PointOfInterest) -> PoiWire {
    PoiWire {
        lat: round_coord(p.location.lat),
        lon: round_coord(p.location.lon),
        arrival: p.arrival,
        departure: p.departure,
    }
}

pub fn write_trips<W: Write>(mut w: W, trips: &[Trip]) -> std::io::Result<()> {
    for t in trips {
        let wire = TripWire {
            trip_id: t.id(),
            user: t.user.0.clone(),
            departure_time: t.departure_time,
            arrival_time: t.arrival_time,
            duration_s: t.duration_s,
            distance_m: sig6(t.distance_m),
            origin: poi_wire(&t.origin),
            destination: poi_wire(&t.destination),
            segment_modes: t
                .segment_modes
                .iter()
                .map(|(m, d)| SegmentWire {
                    mode: m.as_str().to_string(),
                    distance_m: sig6(*d),
                })
                .collect(),
            mode_source: t.mode_source,
            path: t
                .path
                .iter()
                .map(|p| (round_coord(p.point.lat), round_coord(p.point.lon), p.ts))
                .collect(),
        };
        serde_json::to_writer(&mut w, &wire)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_trips(text: &str) -> Result<Vec<Trip>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let w: TripWire = serde_json::from_str(line).map_err(|e| ParseError::new(ln, e.to_string()))?;
        if w.arrival_time <= w.departure_time || w.duration_s != w.arrival_time - w.departure_time {
            return Err(ParseError::new(ln, "inconsistent trip times"));
        }
        if !(w.distance_m.is_finite() && w.distance_m >= 0.0) {
            return Err(ParseError::new(ln, "invalid distance"));
        }
        let poi = |p: &PoiWire| -> Result<PointOfInterest, ParseError> {
            Ok(PointOfInterest {
                location: checked_point(p.lat, p.lon, ln)?,
                arrival: p.arrival,
                departure: p.departure,
            })
        };
        let mut segment_modes = Vec::with_capacity(w.segment_modes.len());
        for s in &w.segment_modes {
            let m = Mode::parse(&s.mode).ok_or_else(|| ParseError::new(ln, format!("unknown mode {:?}", s.mode)))?;
            if !(s.distance_m.is_finite() && s.distance_m >= 0.0) {
                return Err(ParseError::new(ln, "invalid segment distance"));
            }
            segment_modes.push((m, s.distance_m));
        }
        let mut path = Vec::with_capacity(w.path.len());
        for &(lat, lon, ts) in &w.path {
            path.push(TrackPoint {
                ts,
                point: checked_point(lat, lon, ln)?,
            });
        }
        out.push(Trip {
            user: UserId(w.user),
            origin: poi(&w.origin)?,
            destination: poi(&w.destination)?,
            departure_time: w.departure_time,
            arrival_time: w.arrival_time,
            path,
            duration_s: w.duration_s,
            distance_m: w.distance_m,
            segment_modes,
            mode_source: w.mode_source,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    user_id: String,
    home_lat: f64,
    home_lon: f64,
    school_id: String,
    school_lat: f64,
    school_lon: f64,
}

pub fn write_profiles<W: Write>(w: W, profiles: &[UserProfile]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in profiles {
        wtr.serialize(ProfileRow {
            user_id: p.user.0.clone(),
            home_lat: round_coord(p.home.lat),
            home_lon: round_coord(p.home.lon),
            school_id: p.school_id.clone(),
            school_lat: round_coord(p.school_location.lat),
            school_lon: round_coord(p.school_location.lon),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn parse_profiles(text: &str) -> Result<Vec<UserProfile>, ParseError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<ProfileRow>().enumerate() {
        let ln = i + 2;
        let r = row.map_err(|e| ParseError::new(ln, e.to_string()))?;
        out.push(UserProfile {
            user: UserId(r.user_id),
            home: checked_point(r.home_lat, r.home_lon, ln)?,
            school_id: r.school_id,
            school_location: checked_point(r.school_lat, r.school_lon, ln)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_parse_and_reject() {
        let text = r#"{"user":"a","ts":10,"lat":1.3,"lon":103.8,"mode":"bus"}

{"user":"a","ts":5,"lat":1.31,"lon":103.81}
"#;
        let s = parse_samples(text).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].mode, Some(Mode::Bus));
        let g = group_by_user(s);
        assert_eq!(g[&UserId::from("a")][0].ts, 5);

        assert_eq!(
            parse_samples("{\"user\":\"a\",\"ts\":1,\"lat\":91,\"lon\":0}")
                .unwrap_err()
                .line,
            1
        );
        assert!(parse_samples("{\"user\":\"a\",\"ts\":1,\"lat\":1,\"lon\":0,\"mode\":\"boat\"}").is_err());
        assert!(parse_samples("not json").is_err());
    }

    #[test]
    fn catalog_parse() {
        let c = parse_school_catalog("school_id,lat,lon\nS1,1.3,103.8\nS2, 1.31 ,103.9\n").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].id, "S2");
        assert!(parse_school_catalog("id,lat,lon\nS1,1,2\n").is_err());
        assert!(parse_school_catalog("school_id,lat,lon\nS1,abc,2\n").is_err());
    }

    #[test]
    fn trip_round_trip() {
        let p = GeoPoint::new(1.3, 103.8).unwrap();
        let q = GeoPoint::new(1.31, 103.82).unwrap();
        let trip = Trip {
            user: UserId::from("u1"),
            origin: PointOfInterest {
                location: p,
                arrival: 0,
                departure: 100,
            },
            destination: PointOfInterest {
                location: q,
                arrival: 700,
                departure: 2000,
            },
            departure_time: 100,
            arrival_time: 700,
            path: vec![TrackPoint { ts: 100, point: p }, TrackPoint { ts: 700, point: q }],
            duration_s: 600,
            distance_m: 2485.5,
            segment_modes: vec![(Mode::Car, 2485.5)],
            mode_source: ModeSource::Labels,
        };
        let mut buf = Vec::new();
        write_trips(&mut buf, std::slice::from_ref(&trip)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("{\"trip_id\":\"u1@100\""));
        let back = parse_trips(&text).unwrap();
        assert_eq!(back, vec![trip]);
    }
}
