//! Property tests for the invariants each module promises.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use epoa::cluster::{distance_rule_cluster, grid_assign, Cluster, ClusterKey, GridSpec, LocationId};
use epoa::consistency::{lateral_translate, route_consistent};
use epoa::geo::{
    enclosed_area, geodesic_distance, offset_point, outer_contour_area, polygon_area, GeoPoint, PlanarPoint, Polyline,
};
use epoa::metrics::{
    compute_regret, epoa_bounds, epsilon_delta, regret_distribution, EpoaTrip, OptimaRow, OptimaStatus, OptimaTable,
    Regime, RegretRecord,
};
use epoa::pipeline::selftest::synthetic_config;
use epoa::simgame::{
    largest_remainder, pigou_embedded, price_of_anarchy, solve, synthesize_traces, Commodity, Edge, Latency, Objective,
    RoadNetwork, SolverParams, SynthParams,
};
use epoa::stats::{nearest_rank, nearest_rank_lower};
use epoa::trace::io::group_by_user;
use epoa::trace::{clean_dataset, segment_user, smooth, Mode, ModeClass, TrackPoint, Trip, UserId};

fn anchor() -> GeoPoint {
    GeoPoint::new(1.35, 103.8).unwrap()
}

fn sg_point() -> impl Strategy<Value = GeoPoint> {
    (1.16..1.47f64, 103.6..104.05f64).prop_map(|(lat, lon)| GeoPoint::new(lat, lon).unwrap())
}

/// Route from a start point through 1-8 steps of 30-400 m.
fn route() -> impl Strategy<Value = Polyline> {
    (
        -5000.0..5000.0f64,
        -5000.0..5000.0f64,
        prop::collection::vec((30.0..400.0f64, -1.2..1.2f64), 1..8),
        0.0..std::f64::consts::TAU,
    )
        .prop_map(|(e, n, steps, mut heading)| {
            let mut pts = vec![offset_point(&anchor(), e, n)];
            for (len, turn) in steps {
                heading += turn;
                let last = *pts.last().unwrap();
                pts.push(offset_point(&last, len * heading.sin(), len * heading.cos()));
            }
            Polyline::new(pts).unwrap()
        })
}

/// Two routes between the same endpoints; the second wanders up to 300 m
/// off the chord.
fn route_pair() -> impl Strategy<Value = (Polyline, Polyline)> {
    (
        route(),
        prop::collection::vec((-300.0..300.0f64, -300.0..300.0f64), 0..6),
    )
        .prop_map(|(a, bends)| {
            let (s, e) = (a.first(), a.last());
            let k = bends.len() + 1;
            let mut pts = vec![s];
            for (i, (de, dn)) in bends.into_iter().enumerate() {
                let f = (i + 1) as f64 / k as f64;
                let on_chord = GeoPoint::new(s.lat + f * (e.lat - s.lat), s.lon + f * (e.lon - s.lon)).unwrap();
                pts.push(offset_point(&on_chord, de, dn));
            }
            pts.push(e);
            (a, Polyline::new(pts).unwrap())
        })
}

fn ring() -> impl Strategy<Value = Vec<PlanarPoint>> {
    prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 3..12)
        .prop_map(|v| v.into_iter().map(|(x, y)| PlanarPoint::new(x, y)).collect())
}

fn straight(len: f64, bearing: f64) -> Polyline {
    let a = anchor();
    Polyline::new(vec![a, offset_point(&a, len * bearing.sin(), len * bearing.cos())]).unwrap()
}

fn key() -> ClusterKey {
    ClusterKey {
        location: LocationId("g0_0".into()),
        day: 0,
        window: 0,
        school: "S1".into(),
        mode: ModeClass::Private,
    }
}

fn car_trip(user: usize, depart: i64, duration: i64) -> Trip {
    let a = anchor();
    let b = offset_point(&a, 2000.0, 0.0);
    let path = vec![
        TrackPoint { ts: depart, point: a },
        TrackPoint {
            ts: depart + duration,
            point: b,
        },
    ];
    Trip::from_track(UserId(format!("u{user:03}")), path, Mode::Car).unwrap()
}

fn cluster_of(trips: &[Trip]) -> Cluster {
    Cluster {
        key: key(),
        members: (0..trips.len()).collect(),
        centroid: anchor(),
    }
}

fn records(regrets: &[u32]) -> Vec<RegretRecord> {
    regrets
        .iter()
        .enumerate()
        .map(|(i, &r)| RegretRecord {
            trip_id: format!("t{i}"),
            user: UserId(format!("u{i}")),
            cluster: key(),
            duration_s: 600 + r as i64,
            regret_s: r as f64,
            is_baseline: r == 0,
        })
        .collect()
}

fn random_network(rng_seed: u64, degree: usize) -> (RoadNetwork, Vec<Commodity>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n = rng.random_range(3..=5);
    let mut pairs: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    for _ in 0..rng.random_range(1..=5) {
        let a = rng.random_range(0..n - 1);
        pairs.push((a, rng.random_range(a + 1..n)));
    }
    let edges = pairs
        .into_iter()
        .map(|(from, to)| {
            let mut c = [0.0; 5];
            for coef in c.iter_mut().take(degree + 1) {
                *coef = rng.random_range(0.0..2.0);
            }
            Edge {
                from,
                to,
                length_m: 500.0,
                latency: Latency(c),
            }
        })
        .collect();
    let dem = vec![Commodity {
        origin: 0,
        destination: n - 1,
        demand: rng.random_range(0.2..2.0),
    }];
    (RoadNetwork::new(n, edges).unwrap(), dem)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triangle_inequality(p in sg_point(), q in sg_point(), r in sg_point()) {
        let d = |a: &GeoPoint, b: &GeoPoint| geodesic_distance(a, b).unwrap();
        prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-6);
    }

    #[test]
    fn enclosed_area_is_symmetric_and_reflexive((a, b) in route_pair()) {
        prop_assert_eq!(enclosed_area(&a, &b).unwrap(), enclosed_area(&b, &a).unwrap());
        prop_assert_eq!(enclosed_area(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn polygon_area_ignores_rotation_and_reversal(pts in ring(), shift in 0usize..12) {
        let base = polygon_area(&pts);
        let mut rotated = pts.clone();
        rotated.rotate_left(shift % pts.len());
        let mut reversed = pts.clone();
        reversed.reverse();
        let tol = 1e-9 * base.max(1.0);
        prop_assert!((polygon_area(&rotated) - base).abs() <= tol);
        prop_assert!((polygon_area(&reversed) - base).abs() <= tol);
    }

    #[test]
    fn contour_covers_endpoint_span(a in route(), w in 1.0..200.0f64) {
        let span = a.first().distance_to(&a.last());
        prop_assert!(outer_contour_area(&a, w).unwrap() >= w * span * (1.0 - 1e-9));
    }

    #[test]
    fn enclosed_area_is_stable_under_translation(
        (a, b) in route_pair(),
        e in -10_000.0..10_000.0f64,
        n in -10_000.0..10_000.0f64,
    ) {
        let before = enclosed_area(&a, &b).unwrap();
        let after = enclosed_area(&a.translated(e, n).unwrap(), &b.translated(e, n).unwrap()).unwrap();
        prop_assert!((after - before).abs() <= 0.005 * before.max(1.0));
    }

    #[test]
    fn smoothing_keeps_count_and_timestamps(
        pts in prop::collection::vec(sg_point(), 1..40),
        half in 0usize..5,
    ) {
        let track: Vec<TrackPoint> = pts
            .into_iter()
            .enumerate()
            .map(|(i, point)| TrackPoint { ts: 1000 + 15 * i as i64, point })
            .collect();
        let out = smooth(&track, 2 * half + 1).unwrap();
        prop_assert_eq!(out.len(), track.len());
        prop_assert!(out.iter().zip(&track).all(|(a, b)| a.ts == b.ts));
    }

    // Cut-offs are recomputed from whatever set is passed in, so a second
    // pass over a trimmed set trims again; the pass is checked against the
    // cut-offs of its own input instead.
    #[test]
    fn cleaning_keeps_an_ordered_subsequence_within_cutoffs(n in 20usize..80, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut durations: Vec<i64> = (0..n as i64).map(|i| 300 + 7 * i).collect();
        durations.shuffle(&mut rng);
        let trips: Vec<Trip> = durations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let a = anchor();
                let b = offset_point(&a, 500.0 + 11.0 * i as f64, 0.0);
                let path = vec![TrackPoint { ts: 0, point: a }, TrackPoint { ts: d, point: b }];
                Trip::from_track(UserId(format!("u{i}")), path, Mode::Car).unwrap()
            })
            .collect();
        let report = clean_dataset(&trips);
        let mut it = trips.iter();
        prop_assert!(report.trips.iter().all(|t| it.any(|u| u == t)));
        prop_assert_eq!(report.removed, trips.len() - report.trips.len());

        let sorted = |f: &dyn Fn(&Trip) -> f64| {
            let mut v: Vec<f64> = trips.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let dur = sorted(&|t| t.duration_s as f64);
        let dist = sorted(&|t| t.distance_m);
        let inside = |t: &Trip| {
            let (d, x) = (t.duration_s as f64, t.distance_m);
            d >= nearest_rank_lower(&dur, 95.0) && d <= nearest_rank(&dur, 95.0)
                && x >= nearest_rank_lower(&dist, 95.0) && x <= nearest_rank(&dist, 95.0)
        };
        let kept: Vec<&Trip> = trips.iter().filter(|t| inside(t)).collect();
        prop_assert_eq!(report.trips.iter().collect::<Vec<_>>(), kept);
    }

    #[test]
    fn grid_cells_share_ids(homes in prop::collection::vec(sg_point(), 1..60), r in 100.0..2000.0f64) {
        let ids = grid_assign(&homes, r).unwrap();
        let grid = GridSpec::fit(&homes, r).unwrap();
        for i in 0..homes.len() {
            for j in 0..homes.len() {
                if grid.cell_of(&homes[i]) == grid.cell_of(&homes[j]) {
                    prop_assert_eq!(&ids[i], &ids[j]);
                }
            }
        }
    }

    #[test]
    fn distance_rule_is_bounded_monotone_and_deterministic(
        offsets in prop::collection::vec((-2000.0..2000.0f64, -2000.0..2000.0f64), 1..80),
    ) {
        let homes: Vec<GeoPoint> = offsets.iter().map(|&(e, n)| offset_point(&anchor(), e, n)).collect();
        let mut prev = usize::MAX;
        for r in [200.0, 400.0, 600.0, 800.0, 1000.0] {
            let ids = distance_rule_cluster(&homes, r, 5000).unwrap();
            prop_assert_eq!(&ids, &distance_rule_cluster(&homes, r, 5000).unwrap());
            let mut groups: BTreeMap<&LocationId, Vec<usize>> = BTreeMap::new();
            for (i, id) in ids.iter().enumerate() {
                groups.entry(id).or_default().push(i);
            }
            for g in groups.values() {
                for &i in g {
                    for &j in g {
                        prop_assert!(homes[i].distance_to(&homes[j]) <= r);
                    }
                }
            }
            prop_assert!(groups.len() <= prev);
            prev = groups.len();
        }
    }

    #[test]
    fn regret_has_one_baseline_and_grows_with_members(
        durations in prop::collection::vec(60i64..3600, 1..20),
        extra in 60i64..3600,
    ) {
        let trips: Vec<Trip> = durations.iter().enumerate().map(|(i, &d)| car_trip(i, 1000 * i as i64, d)).collect();
        let recs = compute_regret(&cluster_of(&trips), &trips);
        prop_assert!(recs.iter().all(|r| r.regret_s >= 0.0));
        prop_assert_eq!(recs.iter().filter(|r| r.is_baseline).count(), 1);

        let mut grown = trips.clone();
        grown.push(car_trip(99, 50_000, extra));
        let after = compute_regret(&cluster_of(&grown), &grown);
        for (old, new) in recs.iter().zip(&after) {
            prop_assert!(new.regret_s >= old.regret_s);
        }
    }

    #[test]
    fn trimming_accounts_for_every_positive(regrets in prop::collection::vec(0u32..5000, 1..200), trim in 50.0..100.0f64) {
        let dist = regret_distribution(&records(&regrets), trim);
        prop_assert_eq!(dist.retained.len(), dist.positive.len() - dist.trimmed_count());
        if !dist.positive.is_empty() {
            let mut sorted = dist.positive.clone();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[(sorted.len() - 1) / 2];
            let kept = |x: f64| dist.retained.iter().filter(|&&v| v == x).count();
            let all = |x: f64| sorted.iter().filter(|&&v| v == x).count();
            for &x in sorted.iter().filter(|&&x| x <= median) {
                prop_assert_eq!(kept(x), all(x));
            }
        }
    }

    #[test]
    fn epsilon_is_non_increasing_in_delta(regrets in prop::collection::vec(0u32..5000, 1..200), d1 in 0.0..1.0f64, d2 in 0.0..1.0f64) {
        let dist = regret_distribution(&records(&regrets), 95.0);
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(epsilon_delta(&dist, hi) <= epsilon_delta(&dist, lo));
    }

    #[test]
    fn epoa_bounds_are_ordered_and_scale_free(
        trips in prop::collection::vec((120i64..3600, 60.0..1800.0f64, 1.0..2.0f64), 1..20),
        scale in 1u32..5,
    ) {
        let build = |k: f64| {
            let recorded: Vec<Trip> = trips
                .iter()
                .enumerate()
                .map(|(i, &(d, _, _))| car_trip(i, 0, d * k as i64))
                .collect();
            let mut rows = Vec::new();
            for (i, &(_, light, ratio)) in trips.iter().enumerate() {
                for (regime, s) in [(Regime::Light, light), (Regime::Heavy, light * ratio)] {
                    rows.push(OptimaRow {
                        cluster_id: LocationId(format!("g{i}")),
                        school_id: "S1".into(),
                        mode_class: ModeClass::Private,
                        regime,
                        seconds: Some(s * k),
                        status: OptimaStatus::Ok,
                    });
                }
            }
            (recorded, OptimaTable::from_rows(rows))
        };
        let report = |k: f64| {
            let (recorded, table) = build(k);
            let inputs: Vec<EpoaTrip> = recorded
                .iter()
                .enumerate()
                .map(|(i, t)| EpoaTrip { trip: t, location: LocationId(format!("g{i}")), school_id: "S1".into() })
                .collect();
            epoa_bounds(&inputs, &table)
        };
        let base = report(1.0);
        let (lo, hi) = (base.lower.unwrap(), base.upper.unwrap());
        prop_assert!(lo <= hi);
        let scaled = report(scale as f64);
        prop_assert!((scaled.lower.unwrap() - lo).abs() <= 1e-9 * lo);
        prop_assert!((scaled.upper.unwrap() - hi).abs() <= 1e-9 * hi);
    }

    #[test]
    fn route_verdicts_are_symmetric_and_orientation_free((a, b) in route_pair(), w in 1.0..150.0f64) {
        let v = route_consistent(&a, &b, w).unwrap().consistent;
        prop_assert_eq!(route_consistent(&b, &a, w).unwrap().consistent, v);
        prop_assert_eq!(route_consistent(&a.reversed(), &b, w).unwrap().consistent, v);
        prop_assert_eq!(route_consistent(&a, &b.reversed(), w).unwrap().consistent, v);
        prop_assert!(route_consistent(&a, &a, w).unwrap().consistent);
        if v {
            prop_assert!(route_consistent(&a, &b, w * 1.5).unwrap().consistent);
        }
    }

    #[test]
    fn lateral_offsets_beyond_w_are_rejected(
        len in 500.0..5000.0f64,
        bearing in 0.0..std::f64::consts::TAU,
        w in 10.0..200.0f64,
        excess in 1.0..150.0f64,
    ) {
        let a = straight(len, bearing);
        let b = lateral_translate(&a, w + excess).unwrap();
        prop_assert!(!route_consistent(&a, &b, w).unwrap().consistent);
    }

    #[test]
    fn beckmann_potential_descends(seed in any::<u64>()) {
        let (net, dem) = random_network(seed, 1);
        let f = solve(&net, &dem, Objective::Equilibrium, &SolverParams::default()).unwrap();
        for w in f.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn poa_is_at_least_one(seed in any::<u64>(), degree in 0usize..=4) {
        let (net, dem) = random_network(seed, degree);
        prop_assert!(price_of_anarchy(&net, &dem, &SolverParams::default()).unwrap() >= 1.0 - 1e-6);
    }

    #[test]
    fn linear_poa_is_at_most_four_thirds(seed in any::<u64>()) {
        let (net, dem) = random_network(seed, 1);
        prop_assert!(price_of_anarchy(&net, &dem, &SolverParams::default()).unwrap() <= 4.0 / 3.0 + 1e-3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn synthetic_users_follow_rounded_path_flows(seed in any::<u64>(), n_users in 10usize..60, days in 1usize..3) {
        let (net, dem) = pigou_embedded(600.0);
        let flows = solve(&net, &dem, Objective::Equilibrium, &SolverParams::default()).unwrap();
        let params = SynthParams { n_users, days, seed, noise_sigma_m: 10.0, ..SynthParams::default() };
        let out = synthesize_traces(&net, &flows, &params).unwrap();
        prop_assert_eq!(out.truth.len(), n_users);

        let weights: Vec<f64> = flows.paths[0].iter().map(|p| p.flow).collect();
        let expected = largest_remainder(&weights, n_users);
        let mut per_edge = vec![0usize; net.edges().len()];
        let mut want = vec![0usize; net.edges().len()];
        for t in &out.truth {
            let j: usize = t.path_id.trim_start_matches("c0p").parse().unwrap();
            for &e in &flows.paths[0][j].edges {
                per_edge[e] += 1;
            }
        }
        for (p, &count) in flows.paths[0].iter().zip(&expected) {
            for &e in &p.edges {
                want[e] += count;
            }
        }
        prop_assert_eq!(per_edge, want);

        let segment = synthetic_config(seed, "network.net").segment;
        let mut trips = 0;
        for (_, samples) in group_by_user(out.samples) {
            let seg = segment_user(&samples, &segment).unwrap();
            prop_assert_eq!(&seg, &segment_user(&samples, &segment).unwrap());
            for t in &seg.trips {
                prop_assert_eq!(t.origin.departure, t.departure_time);
                prop_assert_eq!(t.destination.arrival, t.arrival_time);
            }
            for w in seg.trips.windows(2) {
                prop_assert!(w[0].arrival_time <= w[1].departure_time);
            }
            trips += seg.trips.len();
        }
        prop_assert_eq!(trips, n_users * days);
    }
}
