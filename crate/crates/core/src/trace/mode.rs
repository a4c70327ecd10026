use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Mode, TraceError, Trip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModeGranularity {
    #[serde(rename = "three-way")]
    ThreeWay,
    #[serde(rename = "binary")]
    Binary,
}

impl ModeGranularity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "three-way" => Some(Self::ThreeWay),
            "binary" => Some(Self::Binary),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeClass {
    Metro,
    Bus,
    Car,
    Public,
    Private,
}

impl ModeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeClass::Metro => "metro",
            ModeClass::Bus => "bus",
            ModeClass::Car => "car",
            ModeClass::Public => "public",
            ModeClass::Private => "private",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "metro" => ModeClass::Metro,
            "bus" => ModeClass::Bus,
            "car" => ModeClass::Car,
            "public" => ModeClass::Public,
            "private" => ModeClass::Private,
            _ => return None,
        })
    }

    /// Private (car) trips are compared against road optima; the rest against transit.
    pub fn is_private(self) -> bool {
        matches!(self, ModeClass::Car | ModeClass::Private)
    }

    pub fn to_binary(self) -> ModeClass {
        if self.is_private() {
            ModeClass::Private
        } else {
            ModeClass::Public
        }
    }
}

impl fmt::Display for ModeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Mode carrying the largest distance in the trip, walking and stationary
/// segments excluded. Ties resolve in the order metro, bus, car.
pub fn principal_mode(trip: &Trip, granularity: ModeGranularity) -> Result<ModeClass, TraceError> {
    let (mut metro, mut bus, mut car) = (0.0, 0.0, 0.0);
    let mut any_vehicle = false;
    for &(m, d) in &trip.segment_modes {
        match m {
            Mode::Metro => metro += d,
            Mode::Bus => bus += d,
            Mode::Car => car += d,
            Mode::Walking | Mode::Stationary => continue,
        }
        any_vehicle = true;
    }
    if !any_vehicle {
        return Err(TraceError::NoVehicleMode(trip.id()));
    }
    let ranked: Vec<(ModeClass, f64)> = match granularity {
        ModeGranularity::ThreeWay => vec![(ModeClass::Metro, metro), (ModeClass::Bus, bus), (ModeClass::Car, car)],
        ModeGranularity::Binary => vec![(ModeClass::Public, metro + bus), (ModeClass::Private, car)],
    };
    let mut best = ranked[0];
    for c in &ranked[1..] {
        if c.1 > best.1 {
            best = *c;
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::trace::{ModeSource, PointOfInterest, UserId};

    fn trip(segs: Vec<(Mode, f64)>) -> Trip {
        let p = GeoPoint::new(1.3, 103.8).unwrap();
        let poi = PointOfInterest {
            location: p,
            arrival: 0,
            departure: 0,
        };
        Trip {
            user: UserId::from("u"),
            origin: poi,
            destination: poi,
            departure_time: 0,
            arrival_time: 1,
            path: vec![],
            duration_s: 1,
            distance_m: segs.iter().map(|s| s.1).sum(),
            segment_modes: segs,
            mode_source: ModeSource::Labels,
        }
    }

    #[test]
    fn single_car() {
        let t = trip(vec![(Mode::Car, 1000.0)]);
        assert_eq!(principal_mode(&t, ModeGranularity::ThreeWay).unwrap(), ModeClass::Car);
        assert_eq!(principal_mode(&t, ModeGranularity::Binary).unwrap(), ModeClass::Private);
    }

    #[test]
    fn bus_metro_walk() {
        let t = trip(vec![
            (Mode::Walking, 500.0),
            (Mode::Bus, 6000.0),
            (Mode::Metro, 2000.0),
            (Mode::Walking, 300.0),
        ]);
        assert_eq!(principal_mode(&t, ModeGranularity::ThreeWay).unwrap(), ModeClass::Bus);
        assert_eq!(principal_mode(&t, ModeGranularity::Binary).unwrap(), ModeClass::Public);
    }

    #[test]
    fn tie_prefers_metro() {
        let t = trip(vec![(Mode::Metro, 4000.0), (Mode::Bus, 4000.0)]);
        assert_eq!(principal_mode(&t, ModeGranularity::ThreeWay).unwrap(), ModeClass::Metro);
        let t = trip(vec![(Mode::Car, 4000.0), (Mode::Bus, 4000.0)]);
        assert_eq!(principal_mode(&t, ModeGranularity::Binary).unwrap(), ModeClass::Public);
    }

    #[test]
    fn walking_only_is_error() {
        let t = trip(vec![(Mode::Walking, 400.0), (Mode::Stationary, 0.0)]);
        assert!(matches!(
            principal_mode(&t, ModeGranularity::ThreeWay),
            Err(TraceError::NoVehicleMode(_))
        ));
    }
}
