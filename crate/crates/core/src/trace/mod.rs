//! From raw location samples to trips, anchors and transport modes.

mod clean;
pub mod io;
mod mode;
mod profile;
mod segment;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoError, GeoPoint};
use crate::parse::ParseError;

pub use clean::{clean_dataset, CleanReport};
pub use mode::{principal_mode, ModeClass, ModeGranularity};
pub use profile::{
    infer_home_school, medoid_index, select_morning_trips, MorningWindow, ProfileParams, School, SchoolCatalog,
    UserProfile,
};
pub use segment::{segment_trips, segment_user, smooth, SegmentParams, Segmentation, STUB_CAR_SPEED_MPS};

/// Seconds since the Unix epoch, UTC.
pub type Timestamp = i64;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed track: {0}")]
    MalformedTrack(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot resolve profile for user {user}: {reason}")]
    UnresolvableProfile { user: UserId, reason: String },
    #[error("trip {0} has no vehicle segment")]
    NoVehicleMode(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Stationary,
    Walking,
    Metro,
    Bus,
    Car,
}

impl Mode {
    pub fn is_vehicle(self) -> bool {
        matches!(self, Mode::Metro | Mode::Bus | Mode::Car)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Stationary => "stationary",
            Mode::Walking => "walking",
            Mode::Metro => "metro",
            Mode::Bus => "bus",
            Mode::Car => "car",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Some(match s {
            "stationary" => Mode::Stationary,
            "walking" => Mode::Walking,
            "metro" => Mode::Metro,
            "bus" => Mode::Bus,
            "car" => Mode::Car,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationSample {
    pub user: UserId,
    pub ts: Timestamp,
    pub point: GeoPoint,
    pub mode: Option<Mode>,
}

/// One point of a (possibly smoothed) track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub ts: Timestamp,
    pub point: GeoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointOfInterest {
    pub location: GeoPoint,
    pub arrival: Timestamp,
    pub departure: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSource {
    /// Mode labels came with the samples.
    Labels,
    /// No labels; the trip was labelled from its median speed.
    SpeedStub,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub user: UserId,
    pub origin: PointOfInterest,
    pub destination: PointOfInterest,
    pub departure_time: Timestamp,
    pub arrival_time: Timestamp,
    pub path: Vec<TrackPoint>,
    pub duration_s: i64,
    pub distance_m: f64,
    pub segment_modes: Vec<(Mode, f64)>,
    pub mode_source: ModeSource,
}

impl Trip {
    pub fn id(&self) -> String {
        format!("{}@{}", self.user, self.departure_time)
    }

    /// Trip along `path` in a single labelled mode, anchored at its first and
    /// last points. Needs at least one point.
    pub fn from_track(user: UserId, path: Vec<TrackPoint>, mode: Mode) -> Result<Trip, TraceError> {
        let (Some(first), Some(last)) = (path.first().copied(), path.last().copied()) else {
            return Err(TraceError::MalformedTrack("empty path".into()));
        };
        let distance_m: f64 = path.windows(2).map(|w| w[0].point.distance_to(&w[1].point)).sum();
        Ok(Trip {
            user,
            origin: PointOfInterest {
                location: first.point,
                arrival: first.ts,
                departure: first.ts,
            },
            destination: PointOfInterest {
                location: last.point,
                arrival: last.ts,
                departure: last.ts,
            },
            departure_time: first.ts,
            arrival_time: last.ts,
            duration_s: last.ts - first.ts,
            distance_m,
            segment_modes: vec![(mode, distance_m)],
            mode_source: ModeSource::Labels,
            path,
        })
    }

    pub fn polyline(&self) -> Result<crate::geo::Polyline, GeoError> {
        crate::geo::Polyline::new(self.path.iter().map(|p| p.point).collect())
    }
}

/// Wall-clock arithmetic at a fixed UTC offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalClock {
    pub utc_offset_s: i64,
}

impl LocalClock {
    pub fn new(utc_offset_s: i64) -> Self {
        LocalClock { utc_offset_s }
    }

    /// Local day number (days since 1970-01-01 local).
    pub fn day(&self, ts: Timestamp) -> i64 {
        (ts + self.utc_offset_s).div_euclid(86_400)
    }

    pub fn seconds_of_day(&self, ts: Timestamp) -> i64 {
        (ts + self.utc_offset_s).rem_euclid(86_400)
    }

    /// 0 = Monday .. 6 = Sunday.
    pub fn weekday(&self, ts: Timestamp) -> i64 {
        // 1970-01-01 was a Thursday
        (self.day(ts) + 3).rem_euclid(7)
    }

    /// UTC timestamp of local `day` at `seconds` past local midnight.
    pub fn at(&self, day: i64, seconds: i64) -> Timestamp {
        day * 86_400 + seconds - self.utc_offset_s
    }
}

/// Calendar date of a local day number, as `YYYY-MM-DD`.
pub fn day_to_date(day: i64) -> String {
    // civil-from-days (proleptic Gregorian)
    let z = day + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    format!("{y:04}-{m:02}-{d:02}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_arithmetic() {
        let c = LocalClock::new(8 * 3600);
        // 2016-03-01T00:00:00+08:00
        let ts = 1_456_761_600;
        assert_eq!(c.seconds_of_day(ts), 0);
        assert_eq!(day_to_date(c.day(ts)), "2016-03-01");
        assert_eq!(c.weekday(ts), 1); // Tuesday
        assert_eq!(c.at(c.day(ts), 3600), ts + 3600);
        assert_eq!(day_to_date(0), "1970-01-01");
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Stationary, Mode::Walking, Mode::Metro, Mode::Bus, Mode::Car] {
            assert_eq!(Mode::parse(m.as_str()), Some(m));
        }
        assert_eq!(Mode::parse("boat"), None);
    }
}
