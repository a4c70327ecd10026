//! Nonatomic congestion games with polynomial edge latencies: Wardrop
//! equilibrium and social optimum by Frank-Wolfe, reference instances, and
//! synthetic location traces generated from a solved flow.

mod instances;
mod netfile;
mod solver;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoError, GeoPoint};
use crate::parse::ParseError;

pub use instances::{braess, braess_embedded, embedding_anchor, pigou, pigou_embedded};
pub use netfile::{parse_network, parse_tntp_net, parse_tntp_trips, write_network};
pub use solver::{
    price_of_anarchy, shortest_path, social_optimum, solve, wardrop_equilibrium, Objective, SolverParams, Variant,
};
pub use synth::{
    largest_remainder, school_id_for, synthesize_traces, write_ground_truth, Detour, GroundTruth, SynthOutput,
    SynthParams, DEFAULT_FIRST_DAY,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("commodity {commodity}: destination {destination} unreachable from {origin}")]
    Infeasible {
        commodity: usize,
        origin: usize,
        destination: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("flow assignment carries no path decomposition")]
    MissingDecomposition,
    #[error("node {0} has no geographic embedding")]
    MissingEmbedding(usize),
    #[error("solver did not converge: relative gap {gap:e} after {iterations} iterations")]
    NotConverged { gap: f64, iterations: usize },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

pub const MAX_DEGREE: usize = 4;

/// Edge latency `c(x) = a0 + a1 x + ... + a4 x^4` in seconds, `x` the flow.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Latency(pub [f64; MAX_DEGREE + 1]);

impl Latency {
    pub fn constant(c: f64) -> Self {
        Latency([c, 0.0, 0.0, 0.0, 0.0])
    }

    pub fn linear(a0: f64, a1: f64) -> Self {
        Latency([a0, a1, 0.0, 0.0, 0.0])
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, a| acc * x + a)
    }

    /// Integral of the latency from 0 to `x`.
    pub fn integral(&self, x: f64) -> f64 {
        self.0
            .iter()
            .enumerate()
            .rev()
            .fold(0.0, |acc, (k, a)| acc * x + a / (k + 1) as f64)
            * x
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.0
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, a)| acc * x + k as f64 * a)
    }

    /// `d/dx [x c(x)] = c(x) + x c'(x)`.
    pub fn marginal(&self, x: f64) -> f64 {
        self.eval(x) + x * self.derivative(x)
    }

    pub fn is_constant(&self) -> bool {
        self.0[1..].iter().all(|a| *a == 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Latency(self.0.map(|a| a * factor))
    }

    fn validate(&self) -> Result<(), String> {
        if self.0.iter().all(|a| a.is_finite() && *a >= 0.0) {
            Ok(())
        } else {
            Err(format!("latency coefficients must be finite and >= 0: {:?}", self.0))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub length_m: f64,
    pub latency: Latency,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Commodity {
    pub origin: usize,
    pub destination: usize,
    pub demand: f64,
}

/// Directed network; nodes are `0..node_count()`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    embeddings: Vec<Option<GeoPoint>>,
    edges: Vec<Edge>,
    /// Outgoing edge ids per node, ascending.
    out: Vec<Vec<usize>>,
}

impl RoadNetwork {
    pub fn new(node_count: usize, edges: Vec<Edge>) -> Result<Self, SimError> {
        for (i, e) in edges.iter().enumerate() {
            if e.from >= node_count || e.to >= node_count {
                return Err(SimError::InvalidNetwork(format!(
                    "edge {i} references a node outside 0..{node_count}"
                )));
            }
            if e.from == e.to {
                return Err(SimError::InvalidNetwork(format!("edge {i} is a self-loop")));
            }
            if !(e.length_m.is_finite() && e.length_m >= 0.0) {
                return Err(SimError::InvalidNetwork(format!("edge {i} has invalid length")));
            }
            e.latency
                .validate()
                .map_err(|m| SimError::InvalidNetwork(format!("edge {i}: {m}")))?;
        }
        let mut out = vec![Vec::new(); node_count];
        for (i, e) in edges.iter().enumerate() {
            out[e.from].push(i);
        }
        Ok(RoadNetwork {
            embeddings: vec![None; node_count],
            edges,
            out,
        })
    }

    pub fn with_embeddings(mut self, points: Vec<GeoPoint>) -> Result<Self, SimError> {
        if points.len() != self.node_count() {
            return Err(SimError::InvalidNetwork(format!(
                "{} embeddings for {} nodes",
                points.len(),
                self.node_count()
            )));
        }
        for p in &points {
            p.validate()?;
        }
        self.embeddings = points.into_iter().map(Some).collect();
        Ok(self)
    }

    pub fn set_embedding(&mut self, node: usize, p: GeoPoint) -> Result<(), SimError> {
        p.validate()?;
        let slot = self
            .embeddings
            .get_mut(node)
            .ok_or_else(|| SimError::InvalidNetwork(format!("no node {node}")))?;
        *slot = Some(p);
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.embeddings.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn outgoing(&self, node: usize) -> &[usize] {
        &self.out[node]
    }

    pub fn embedding(&self, node: usize) -> Option<GeoPoint> {
        self.embeddings.get(node).copied().flatten()
    }

    pub fn validate_commodities(&self, demands: &[Commodity]) -> Result<(), SimError> {
        if demands.is_empty() {
            return Err(SimError::InvalidParameter("no commodities".into()));
        }
        for (k, c) in demands.iter().enumerate() {
            if c.origin >= self.node_count() || c.destination >= self.node_count() {
                return Err(SimError::InvalidParameter(format!(
                    "commodity {k} references an unknown node"
                )));
            }
            if c.origin == c.destination {
                return Err(SimError::InvalidParameter(format!(
                    "commodity {k} has origin = destination"
                )));
            }
            if !(c.demand.is_finite() && c.demand > 0.0) {
                return Err(SimError::InvalidParameter(format!("commodity {k} demand must be > 0")));
            }
        }
        Ok(())
    }

    /// Nearest embedded node to `p` and its distance in meters.
    pub fn nearest_node(&self, p: &GeoPoint) -> Option<(usize, f64)> {
        self.embeddings
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.map(|q| (i, p.distance_to(&q))))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }
}

/// Flow on one path; `edges` lists edge ids from origin to destination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathFlow {
    pub edges: Vec<usize>,
    pub flow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowAssignment {
    pub edge_flows: Vec<f64>,
    /// Per commodity, paths carrying positive flow, sorted by edge list.
    pub paths: Vec<Vec<PathFlow>>,
    /// Social cost `sum x_e c_e(x_e)`.
    pub total_cost: f64,
    pub relative_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value (potential or social cost) after each iteration.
    pub objective_history: Vec<f64>,
}

impl FlowAssignment {
    pub fn path_latency(&self, net: &RoadNetwork, path: &[usize]) -> f64 {
        path.iter()
            .map(|&e| net.edges()[e].latency.eval(self.edge_flows[e]))
            .sum()
    }

    /// Flow-weighted mean latency of a commodity.
    pub fn mean_latency(&self, net: &RoadNetwork, commodity: usize) -> f64 {
        let paths = &self.paths[commodity];
        let demand: f64 = paths.iter().map(|p| p.flow).sum();
        paths
            .iter()
            .map(|p| p.flow * self.path_latency(net, &p.edges))
            .sum::<f64>()
            / demand
    }
}

pub fn total_cost(net: &RoadNetwork, flows: &[f64]) -> f64 {
    net.edges().iter().zip(flows).map(|(e, x)| x * e.latency.eval(*x)).sum()
}

pub fn beckmann_potential(net: &RoadNetwork, flows: &[f64]) -> f64 {
    net.edges().iter().zip(flows).map(|(e, x)| e.latency.integral(*x)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_polynomial() {
        let c = Latency([1.0, 2.0, 0.0, 3.0, 0.0]);
        assert_eq!(c.eval(2.0), 1.0 + 4.0 + 24.0);
        assert_eq!(c.integral(2.0), 2.0 + 4.0 + 12.0);
        assert_eq!(c.derivative(2.0), 2.0 + 36.0);
        assert_eq!(c.marginal(2.0), 29.0 + 2.0 * 38.0);
        assert!(Latency::constant(5.0).is_constant());
    }

    #[test]
    fn rejects_bad_networks() {
        let e = |from, to, a0: f64| Edge {
            from,
            to,
            length_m: 1.0,
            latency: Latency::constant(a0),
        };
        assert!(RoadNetwork::new(2, vec![e(0, 2, 1.0)]).is_err());
        assert!(RoadNetwork::new(2, vec![e(0, 0, 1.0)]).is_err());
        assert!(RoadNetwork::new(2, vec![e(0, 1, -1.0)]).is_err());
        let net = RoadNetwork::new(2, vec![e(0, 1, 1.0)]).unwrap();
        let bad = Commodity {
            origin: 0,
            destination: 0,
            demand: 1.0,
        };
        assert!(net.validate_commodities(&[bad]).is_err());
    }
}
