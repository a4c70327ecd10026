//! Reference instances with hand-solvable flows.
//!
//! The plain builders use unit demand and unit time. The embedded builders
//! scale every latency by `t_scale` seconds and place nodes inside a 20 km
//! box so that trace synthesis produces city-scale trips. Scaling latencies
//! by a constant leaves both flows and the price of anarchy unchanged.

use super::{Commodity, Edge, Latency, RoadNetwork};
use crate::geo::{offset_point, GeoPoint};

/// South-west corner of the synthetic 20 km box.
pub fn embedding_anchor() -> GeoPoint {
    GeoPoint { lat: 1.30, lon: 103.75 }
}

fn place(east_m: f64, north_m: f64) -> GeoPoint {
    offset_point(&embedding_anchor(), east_m, north_m)
}

fn build(points: Vec<GeoPoint>, arcs: &[(usize, usize, Latency)], demand: f64) -> (RoadNetwork, Vec<Commodity>) {
    let edges = arcs
        .iter()
        .map(|&(from, to, latency)| Edge {
            from,
            to,
            length_m: points[from].distance_to(&points[to]),
            latency,
        })
        .collect();
    let net = RoadNetwork::new(points.len(), edges)
        .and_then(|n| n.with_embeddings(points))
        .expect("reference instance is valid");
    let dest = net.node_count() - 1;
    (
        net,
        vec![Commodity {
            origin: 0,
            destination: dest,
            demand,
        }],
    )
}

/// Two parallel links `c1(x) = x` and `c2(x) = 1`, unit demand.
pub fn pigou() -> (RoadNetwork, Vec<Commodity>) {
    build(
        vec![place(2000.0, 10_000.0), place(18_000.0, 10_000.0)],
        &[(0, 1, Latency::linear(0.0, 1.0)), (0, 1, Latency::constant(1.0))],
        1.0,
    )
}

/// Pigou with both links split at a midpoint so the two routes have distinct
/// geometry. Nodes: 0 origin, 1 north via, 2 south via, 3 destination.
pub fn pigou_embedded(t_scale: f64) -> (RoadNetwork, Vec<Commodity>) {
    let half = 0.5 * t_scale;
    build(
        vec![
            place(6000.0, 10_000.0),
            place(10_000.0, 11_500.0),
            place(10_000.0, 8_500.0),
            place(14_000.0, 10_000.0),
        ],
        &[
            (0, 1, Latency::linear(0.0, half)),
            (1, 3, Latency::linear(0.0, half)),
            (0, 2, Latency::constant(half)),
            (2, 3, Latency::constant(half)),
        ],
        1.0,
    )
}

/// Classic Braess network: nodes 0 = s, 1 = a, 2 = b, 3 = t; links
/// s→a (x), a→t (1), s→b (1), b→t (x) and the free shortcut a→b.
pub fn braess() -> (RoadNetwork, Vec<Commodity>) {
    braess_with(1.0, place(10_000.0, 13_000.0), place(10_000.0, 7_000.0))
}

/// Braess scaled by `t_scale` seconds. The shortcut has zero latency, so
/// its endpoints share one location and it has zero length.
pub fn braess_embedded(t_scale: f64) -> (RoadNetwork, Vec<Commodity>) {
    let hub = place(10_000.0, 10_000.0);
    braess_with(t_scale, hub, hub)
}

fn braess_with(t: f64, a: GeoPoint, b: GeoPoint) -> (RoadNetwork, Vec<Commodity>) {
    build(
        vec![place(6000.0, 10_000.0), a, b, place(14_000.0, 10_000.0)],
        &[
            (0, 1, Latency::linear(0.0, t)),
            (1, 3, Latency::constant(t)),
            (0, 2, Latency::constant(t)),
            (2, 3, Latency::linear(0.0, t)),
            (1, 2, Latency::constant(0.0)),
        ],
        1.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgame::{price_of_anarchy, wardrop_equilibrium, SolverParams};

    #[test]
    fn embedded_instances_keep_the_ratio() {
        let p = SolverParams::default();
        for (net, dem) in [pigou_embedded(1800.0), braess_embedded(900.0)] {
            let poa = price_of_anarchy(&net, &dem, &p).unwrap();
            assert!((poa - 4.0 / 3.0).abs() < 1e-6, "{poa}");
        }
        let (net, dem) = braess_embedded(900.0);
        let eq = wardrop_equilibrium(&net, &dem, &p).unwrap();
        assert!((eq.total_cost - 1800.0).abs() < 1e-3);
        assert_eq!(net.edges()[4].length_m, 0.0);
    }

    #[test]
    fn embeddings_fit_the_box() {
        let anchor = embedding_anchor();
        for (net, _) in [pigou(), braess(), pigou_embedded(1.0), braess_embedded(1.0)] {
            for i in 0..net.node_count() {
                let p = net.embedding(i).unwrap();
                assert!(p.lat >= anchor.lat && p.lon >= anchor.lon);
                assert!(anchor.distance_to(&p) < 20_000.0 * 2f64.sqrt());
            }
        }
    }
}
