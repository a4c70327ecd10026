use super::Trip;
use crate::stats::{nearest_rank, nearest_rank_lower};

/// Datasets smaller than this are returned unchanged.
pub const MIN_TRIPS_FOR_CLEANING: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CleanReport {
    pub trips: Vec<Trip>,
    pub removed: usize,
    /// Set when the dataset was too small to trim.
    pub too_small: bool,
}

/// Drop the top and bottom 5 % of trips by duration and by distance.
///
/// A trip is removed when either value lies strictly above the upper
/// nearest-rank 95th percentile or strictly below the mirrored lower
/// cut-off. Input order is preserved.
pub fn clean_dataset(trips: &[Trip]) -> CleanReport {
    if trips.len() < MIN_TRIPS_FOR_CLEANING {
        return CleanReport {
            trips: trips.to_vec(),
            removed: 0,
            too_small: true,
        };
    }
    let mut durations: Vec<f64> = trips.iter().map(|t| t.duration_s as f64).collect();
    let mut distances: Vec<f64> = trips.iter().map(|t| t.distance_m).collect();
    durations.sort_by(f64::total_cmp);
    distances.sort_by(f64::total_cmp);
    let (d_lo, d_hi) = (nearest_rank_lower(&durations, 95.0), nearest_rank(&durations, 95.0));
    let (x_lo, x_hi) = (nearest_rank_lower(&distances, 95.0), nearest_rank(&distances, 95.0));
    let kept: Vec<Trip> = trips
        .iter()
        .filter(|t| {
            let d = t.duration_s as f64;
            d >= d_lo && d <= d_hi && t.distance_m >= x_lo && t.distance_m <= x_hi
        })
        .cloned()
        .collect();
    CleanReport {
        removed: trips.len() - kept.len(),
        trips: kept,
        too_small: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::trace::{Mode, ModeSource, PointOfInterest, UserId};

    fn trip(i: usize, duration: i64, distance: f64) -> Trip {
        let p = GeoPoint::new(1.3, 103.8).unwrap();
        let poi = PointOfInterest {
            location: p,
            arrival: 0,
            departure: 0,
        };
        Trip {
            user: UserId(format!("u{i:03}")),
            origin: poi,
            destination: poi,
            departure_time: 0,
            arrival_time: duration,
            path: vec![],
            duration_s: duration,
            distance_m: distance,
            segment_modes: vec![(Mode::Car, distance)],
            mode_source: ModeSource::Labels,
        }
    }

    #[test]
    fn distinct_durations_keep_ninety() {
        // shuffled order to check order preservation
        let trips: Vec<Trip> = (0..100)
            .map(|i| trip(i, 600 + ((i * 37) % 100) as i64, 5000.0))
            .collect();
        let r = clean_dataset(&trips);
        assert_eq!(r.trips.len(), 90);
        assert_eq!(r.removed, 10);
        let ids: Vec<String> = r.trips.iter().map(|t| t.user.0.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert!(r.trips.iter().all(|t| (605..=694).contains(&t.duration_s)));
    }

    #[test]
    fn identical_trips_all_survive() {
        let trips: Vec<Trip> = (0..40).map(|i| trip(i, 900, 7000.0)).collect();
        let r = clean_dataset(&trips);
        assert_eq!(r.trips.len(), 40);
        assert_eq!(clean_dataset(&r.trips), r);
    }

    #[test]
    fn outlier_removed() {
        let mut trips: Vec<Trip> = (0..100).map(|i| trip(i, 900, 7000.0)).collect();
        trips[42] = trip(42, 90_000, 7000.0);
        let r = clean_dataset(&trips);
        assert!(r.trips.iter().all(|t| t.duration_s == 900));
        assert_eq!(r.trips.len(), 99);
    }

    #[test]
    fn small_dataset_flagged() {
        let trips: Vec<Trip> = (0..5).map(|i| trip(i, 100 * i as i64 + 1, 10.0)).collect();
        let r = clean_dataset(&trips);
        assert!(r.too_small);
        assert_eq!(r.trips.len(), 5);
    }
}
