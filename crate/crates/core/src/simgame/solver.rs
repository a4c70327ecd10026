use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::{beckmann_potential, total_cost, Commodity, FlowAssignment, PathFlow, RoadNetwork, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Minimize the Beckmann potential; edge weights are latencies.
    Equilibrium,
    /// Minimize total travel time; edge weights are marginal costs.
    Optimum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Step toward the all-or-nothing flow of every commodity at once.
    Classic,
    /// Per commodity, shift flow from the costliest used path onto the
    /// current shortest path.
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    /// Stop once the relative duality gap is at most this.
    pub tol: f64,
    pub max_iterations: usize,
    pub bisection_steps: usize,
    pub variant: Variant,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            tol: 1e-6,
            max_iterations: 10_000,
            bisection_steps: 50,
            variant: Variant::Pairwise,
        }
    }
}

#[derive(PartialEq)]
struct Label(f64, usize);

impl Eq for Label {}

impl Ord for Label {
    // min-heap on (distance, node)
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest path under non-negative edge weights, as edge ids, with its
/// weight. Among equal-weight paths the result is fixed by node and edge
/// index order.
pub fn shortest_path(
    net: &RoadNetwork,
    weights: &[f64],
    origin: usize,
    destination: usize,
) -> Option<(Vec<usize>, f64)> {
    let n = net.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[origin] = 0.0;
    heap.push(Label(0.0, origin));
    while let Some(Label(d, u)) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        if u == destination {
            break;
        }
        for &e in net.outgoing(u) {
            let v = net.edges()[e].to;
            let nd = d + weights[e];
            if nd < dist[v] {
                dist[v] = nd;
                pred[v] = Some(e);
                heap.push(Label(nd, v));
            }
        }
    }
    if !dist[destination].is_finite() {
        return None;
    }
    let mut path = Vec::new();
    let mut v = destination;
    while let Some(e) = pred[v] {
        path.push(e);
        v = net.edges()[e].from;
    }
    path.reverse();
    Some((path, dist[destination]))
}

fn edge_weights(net: &RoadNetwork, x: &[f64], obj: Objective) -> Vec<f64> {
    net.edges()
        .iter()
        .zip(x)
        .map(|(e, &xe)| match obj {
            Objective::Equilibrium => e.latency.eval(xe),
            Objective::Optimum => e.latency.marginal(xe),
        })
        .collect()
}

fn objective_value(net: &RoadNetwork, x: &[f64], obj: Objective) -> f64 {
    match obj {
        Objective::Equilibrium => beckmann_potential(net, x),
        Objective::Optimum => total_cost(net, x),
    }
}

/// Step length in `[0, t_max]` minimizing the convex objective along `d`,
/// by bisection on the directional derivative. The returned step never
/// passes the minimizer, so the objective cannot increase.
fn line_search(net: &RoadNetwork, x: &[f64], d: &[(usize, f64)], t_max: f64, obj: Objective, steps: usize) -> f64 {
    let slope = |t: f64| -> f64 {
        d.iter()
            .map(|&(e, de)| {
                let c = &net.edges()[e].latency;
                let xe = (x[e] + t * de).max(0.0);
                de * match obj {
                    Objective::Equilibrium => c.eval(xe),
                    Objective::Optimum => c.marginal(xe),
                }
            })
            .sum()
    };
    if slope(0.0) >= 0.0 {
        return 0.0;
    }
    if slope(t_max) <= 0.0 {
        return t_max;
    }
    let (mut lo, mut hi) = (0.0, t_max);
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

type PathSet = BTreeMap<Vec<usize>, f64>;

fn edge_flows(net: &RoadNetwork, paths: &[PathSet]) -> Vec<f64> {
    let mut x = vec![0.0; net.edges().len()];
    for set in paths {
        for (p, f) in set {
            for &e in p {
                x[e] += f;
            }
        }
    }
    x
}

fn path_weight(path: &[usize], w: &[f64]) -> f64 {
    path.iter().map(|&e| w[e]).sum()
}

/// Sparse difference `to - from` between two paths scaled to unit flow.
fn path_direction(to: &[usize], from: &[usize]) -> Vec<(usize, f64)> {
    let mut d: BTreeMap<usize, f64> = BTreeMap::new();
    for &e in to {
        *d.entry(e).or_default() += 1.0;
    }
    for &e in from {
        *d.entry(e).or_default() -= 1.0;
    }
    d.into_iter().filter(|(_, v)| *v != 0.0).collect()
}

fn all_or_nothing(
    net: &RoadNetwork,
    w: &[f64],
    demands: &[Commodity],
) -> Result<(Vec<f64>, Vec<Vec<usize>>), SimError> {
    let mut y = vec![0.0; net.edges().len()];
    let mut paths = Vec::with_capacity(demands.len());
    for (k, c) in demands.iter().enumerate() {
        let (p, _) = shortest_path(net, w, c.origin, c.destination).ok_or(SimError::Infeasible {
            commodity: k,
            origin: c.origin,
            destination: c.destination,
        })?;
        for &e in &p {
            y[e] += c.demand;
        }
        paths.push(p);
    }
    Ok((y, paths))
}

fn relative_gap(net: &RoadNetwork, x: &[f64], y: &[f64], w: &[f64], obj: Objective) -> f64 {
    let gap: f64 = w.iter().zip(x.iter().zip(y)).map(|(we, (xe, ye))| we * (xe - ye)).sum();
    let gap = gap.max(0.0);
    if gap == 0.0 {
        return 0.0;
    }
    let f = objective_value(net, x, obj).abs();
    if f > 0.0 {
        gap / f
    } else {
        f64::INFINITY
    }
}

/// Frank-Wolfe on the chosen objective. Hitting the iteration cap returns
/// the last iterate with `converged = false`.
pub fn solve(
    net: &RoadNetwork,
    demands: &[Commodity],
    obj: Objective,
    params: &SolverParams,
) -> Result<FlowAssignment, SimError> {
    net.validate_commodities(demands)?;
    if !(params.tol > 0.0) || params.max_iterations == 0 {
        return Err(SimError::InvalidParameter(
            "tolerance must be > 0 and the iteration cap >= 1".into(),
        ));
    }
    let zero = vec![0.0; net.edges().len()];
    let (_, init) = all_or_nothing(net, &edge_weights(net, &zero, obj), demands)?;
    let mut paths: Vec<PathSet> = init
        .into_iter()
        .zip(demands)
        .map(|(p, c)| BTreeMap::from([(p, c.demand)]))
        .collect();
    let mut x = edge_flows(net, &paths);
    let mut history = Vec::new();
    let mut gap = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iterations {
        iterations += 1;
        let w = edge_weights(net, &x, obj);
        let (y, aon_paths) = all_or_nothing(net, &w, demands)?;
        gap = relative_gap(net, &x, &y, &w, obj);
        if gap <= params.tol {
            converged = true;
            history.push(objective_value(net, &x, obj));
            break;
        }
        match params.variant {
            Variant::Classic => {
                let d: Vec<(usize, f64)> = (0..x.len())
                    .filter(|&e| y[e] != x[e])
                    .map(|e| (e, y[e] - x[e]))
                    .collect();
                let lambda = line_search(net, &x, &d, 1.0, obj, params.bisection_steps);
                for (set, (p, c)) in paths.iter_mut().zip(aon_paths.into_iter().zip(demands)) {
                    for f in set.values_mut() {
                        *f *= 1.0 - lambda;
                    }
                    *set.entry(p).or_default() += lambda * c.demand;
                    set.retain(|_, f| *f > 0.0);
                }
            }
            Variant::Pairwise => {
                for (k, c) in demands.iter().enumerate() {
                    let w = edge_weights(net, &x, obj);
                    let (best, best_w) = shortest_path(net, &w, c.origin, c.destination)
                        .expect("reachability checked by all-or-nothing");
                    let (away, away_w) = paths[k]
                        .keys()
                        .map(|p| (p, path_weight(p, &w)))
                        .fold(None, |acc: Option<(&Vec<usize>, f64)>, cur| match acc {
                            Some(a) if a.1 >= cur.1 => Some(a),
                            _ => Some(cur),
                        })
                        .expect("every commodity keeps a used path");
                    if away_w <= best_w || *away == best {
                        continue;
                    }
                    let away = away.clone();
                    let t_max = paths[k][&away];
                    let d = path_direction(&best, &away);
                    let t = line_search(net, &x, &d, t_max, obj, params.bisection_steps);
                    if t <= 0.0 {
                        continue;
                    }
                    if t >= t_max {
                        paths[k].remove(&away);
                    } else {
                        *paths[k].get_mut(&away).expect("path present") -= t;
                    }
                    *paths[k].entry(best).or_default() += t;
                    for &(e, de) in &d {
                        x[e] = (x[e] + t * de).max(0.0);
                    }
                }
            }
        }
        x = edge_flows(net, &paths);
        history.push(objective_value(net, &x, obj));
    }
    if !converged {
        let w = edge_weights(net, &x, obj);
        let (y, _) = all_or_nothing(net, &w, demands)?;
        gap = relative_gap(net, &x, &y, &w, obj);
        converged = gap <= params.tol;
    }
    Ok(FlowAssignment {
        total_cost: total_cost(net, &x),
        edge_flows: x,
        paths: paths
            .into_iter()
            .map(|set| set.into_iter().map(|(edges, flow)| PathFlow { edges, flow }).collect())
            .collect(),
        relative_gap: gap,
        iterations,
        converged,
        objective_history: history,
    })
}

pub fn wardrop_equilibrium(
    net: &RoadNetwork,
    demands: &[Commodity],
    params: &SolverParams,
) -> Result<FlowAssignment, SimError> {
    solve(net, demands, Objective::Equilibrium, params)
}

pub fn social_optimum(
    net: &RoadNetwork,
    demands: &[Commodity],
    params: &SolverParams,
) -> Result<FlowAssignment, SimError> {
    solve(net, demands, Objective::Optimum, params)
}

/// Equilibrium social cost over optimal social cost. Both solves must converge.
pub fn price_of_anarchy(net: &RoadNetwork, demands: &[Commodity], params: &SolverParams) -> Result<f64, SimError> {
    let eq = wardrop_equilibrium(net, demands, params)?;
    let opt = social_optimum(net, demands, params)?;
    for a in [&eq, &opt] {
        if !a.converged {
            return Err(SimError::NotConverged {
                gap: a.relative_gap,
                iterations: a.iterations,
            });
        }
    }
    if opt.total_cost == 0.0 {
        return Ok(1.0);
    }
    Ok(eq.total_cost / opt.total_cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgame::{braess, pigou, Edge, Latency};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-4
    }

    #[test]
    fn pigou_flows() {
        let (net, dem) = pigou();
        for variant in [Variant::Classic, Variant::Pairwise] {
            let p = SolverParams {
                variant,
                ..SolverParams::default()
            };
            let eq = wardrop_equilibrium(&net, &dem, &p).unwrap();
            assert!(eq.converged && eq.iterations <= 200);
            assert!(close(eq.edge_flows[0], 1.0) && close(eq.total_cost, 1.0));
            let opt = social_optimum(&net, &dem, &p).unwrap();
            assert!(opt.converged && opt.iterations <= 200);
            assert!(close(opt.edge_flows[0], 0.5) && close(opt.total_cost, 0.75));
            assert!((price_of_anarchy(&net, &dem, &p).unwrap() - 4.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn braess_flows() {
        let (net, dem) = braess();
        let p = SolverParams::default();
        let eq = wardrop_equilibrium(&net, &dem, &p).unwrap();
        assert!(close(eq.total_cost, 2.0));
        assert_eq!(eq.paths[0].len(), 1);
        assert_eq!(eq.paths[0][0].edges.len(), 3);
        let opt = social_optimum(&net, &dem, &p).unwrap();
        assert!(close(opt.total_cost, 1.5));
        assert!(opt.paths[0].iter().all(|pf| pf.edges.len() == 2 && close(pf.flow, 0.5)));
    }

    #[test]
    fn constant_latencies_need_one_iteration() {
        let e = |from, to, c| Edge {
            from,
            to,
            length_m: 100.0,
            latency: Latency::constant(c),
        };
        let net = RoadNetwork::new(3, vec![e(0, 1, 2.0), e(1, 2, 2.0), e(0, 2, 5.0)]).unwrap();
        let dem = [Commodity {
            origin: 0,
            destination: 2,
            demand: 3.0,
        }];
        let p = SolverParams::default();
        let eq = wardrop_equilibrium(&net, &dem, &p).unwrap();
        assert_eq!(eq.iterations, 1);
        assert_eq!(eq.relative_gap, 0.0);
        let opt = social_optimum(&net, &dem, &p).unwrap();
        assert_eq!(eq.total_cost, opt.total_cost);
        assert_eq!(price_of_anarchy(&net, &dem, &p).unwrap(), 1.0);
    }

    #[test]
    fn unreachable_destination() {
        let net = RoadNetwork::new(
            3,
            vec![Edge {
                from: 0,
                to: 1,
                length_m: 1.0,
                latency: Latency::constant(1.0),
            }],
        )
        .unwrap();
        let dem = [Commodity {
            origin: 0,
            destination: 2,
            demand: 1.0,
        }];
        assert!(matches!(
            wardrop_equilibrium(&net, &dem, &SolverParams::default()),
            Err(SimError::Infeasible { .. })
        ));
    }

    #[test]
    fn iteration_cap_flags_not_converged() {
        let (net, dem) = pigou();
        let p = SolverParams {
            max_iterations: 1,
            variant: Variant::Classic,
            ..SolverParams::default()
        };
        let opt = social_optimum(&net, &dem, &p).unwrap();
        assert_eq!(opt.iterations, 1);
        assert!(opt.converged == (opt.relative_gap <= p.tol));
    }
}
