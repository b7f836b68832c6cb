use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linear::BlockTridiagonal;
use super::{Factor, Graph, NodeLayout, StateNode};
use crate::error::{Error, Result};
use crate::types::ReceiverState;

const LAMBDA_MAX: f64 = 1e12;
const LAMBDA_MIN: f64 = 1e-12;

/// Robust loss applied to the whitened residual norm of each factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Robust {
    None,
    Huber(f64),
}

impl Robust {
    /// Loss value for a squared whitened norm.
    fn rho(self, e2: f64) -> f64 {
        match self {
            Robust::None => e2,
            Robust::Huber(k) => {
                let e = e2.sqrt();
                if e <= k {
                    e2
                } else {
                    2.0 * k * e - k * k
                }
            }
        }
    }

    /// IRLS weight `ρ'(e²)`.
    fn weight(self, e2: f64) -> f64 {
        match self {
            Robust::None => 1.0,
            Robust::Huber(k) => {
                let e = e2.sqrt();
                if e <= k {
                    1.0
                } else {
                    k / e
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmOptions {
    pub max_iter: usize,
    pub lambda0: f64,
    /// Converged once the largest step component falls below this.
    pub step_tol: f64,
    pub robust: Robust,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            lambda0: 1e-4,
            step_tol: 1e-6,
            robust: Robust::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizeReport {
    /// Linear solves performed (accepted and rejected).
    pub iterations: usize,
    pub converged: bool,
    /// Objective at the start and after every accepted step.
    pub cost_history: Vec<f64>,
}

impl OptimizeReport {
    pub fn final_cost(&self) -> f64 {
        self.cost_history.last().copied().unwrap_or(f64::NAN)
    }
}

/// Estimates for the epoch nodes, in epoch order.
#[derive(Debug, Clone, PartialEq)]
pub struct FgoSolution {
    pub t: Vec<f64>,
    pub states: Vec<ReceiverState>,
    /// Marginal covariance of each node's free variables, laid out per `layouts`.
    pub covariances: Vec<DMatrix<f64>>,
    pub layouts: Vec<NodeLayout>,
    pub degraded: Vec<bool>,
    pub report: OptimizeReport,
}

/// Gauss-Newton normal equations `H·δ = rhs` over the free nodes in index order.
pub struct LinearSystem {
    pub h: BlockTridiagonal,
    pub rhs: Vec<DVector<f64>>,
    /// Node index of each block.
    pub free: Vec<usize>,
    pub cost: f64,
}

fn chain_positions(nodes: &[StateNode]) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut free = Vec::new();
    let mut pos = vec![None; nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        if !n.fixed {
            pos[i] = Some(free.len());
            free.push(i);
        }
    }
    (free, pos)
}

pub fn linearize(graph: &Graph, robust: Robust) -> Result<LinearSystem> {
    let (free, pos) = chain_positions(&graph.nodes);
    let sizes: Vec<usize> = free.iter().map(|&i| graph.nodes[i].dim()).collect();
    let mut h = BlockTridiagonal::zeros(&sizes);
    let mut rhs: Vec<DVector<f64>> = sizes.iter().map(|&s| DVector::zeros(s)).collect();
    let base = graph.base_position();
    let mut cost = 0.0;
    for f in &graph.factors {
        let ev = f.evaluate(&graph.nodes, base.as_ref())?;
        let r = &f.sqrt_info * &ev.residual;
        let e2 = r.norm_squared();
        cost += robust.rho(e2);
        let w = robust.weight(e2);
        let js: Vec<(usize, DMatrix<f64>)> = f
            .node_refs
            .iter()
            .zip(&ev.jacobians)
            .filter_map(|(&n, j)| pos[n].map(|p| (p, &f.sqrt_info * j)))
            .collect();
        if js.len() == 2 && js[0].0.abs_diff(js[1].0) != 1 {
            return Err(Error::NonChainFactor);
        }
        for (p, j) in &js {
            let jt = j.transpose();
            h.diag[*p] += (&jt * j) * w;
            rhs[*p] -= (&jt * &r) * w;
        }
        if js.len() == 2 {
            let (a, b) = if js[0].0 < js[1].0 { (&js[0], &js[1]) } else { (&js[1], &js[0]) };
            h.upper[a.0] += (a.1.transpose() * &b.1) * w;
        }
    }
    Ok(LinearSystem { h, rhs, free, cost })
}

/// Objective change between two node sets. Residual differences come from
/// [`Factor::prediction_change`], so the sign is reliable even when the change
/// is far below the rounding error of the objective itself.
fn cost_change(graph: &Graph, old: &[StateNode], new: &[StateNode], robust: Robust) -> Result<f64> {
    let base = graph.base_position();
    let mut total = 0.0;
    for f in &graph.factors {
        let r0 = &f.sqrt_info * f.evaluate(old, base.as_ref())?.residual;
        let dr = -(&f.sqrt_info * f.prediction_change(old, new));
        let e0 = r0.norm_squared();
        let de = dr.dot(&(2.0 * &r0 + &dr));
        total += match robust {
            Robust::Huber(k) if (e0 + de).max(e0) > k * k => robust.rho(e0 + de) - robust.rho(e0),
            _ => de,
        };
    }
    Ok(total)
}

/// Levenberg-Marquardt on the whole graph; nodes are updated in place.
fn solve_batch(graph: &mut Graph, opts: &LmOptions) -> Result<OptimizeReport> {
    let mut lin = linearize(graph, opts.robust)?;
    let mut report = OptimizeReport {
        cost_history: vec![lin.cost],
        ..OptimizeReport::default()
    };
    if lin.free.is_empty() {
        report.converged = true;
        return Ok(report);
    }
    let mut lambda = opts.lambda0;
    while report.iterations < opts.max_iter {
        report.iterations += 1;
        let mut h = lin.h.clone();
        h.damp(lambda);
        let delta = match h.factorize() {
            Ok(f) => f.solve(&lin.rhs),
            Err(_) => {
                lambda *= 10.0;
                if lambda > LAMBDA_MAX {
                    return Err(Error::SingularSystem);
                }
                continue;
            }
        };
        let step = delta.iter().map(|d| d.amax()).fold(0.0, f64::max);
        let mut trial = graph.nodes.clone();
        for (k, &n) in lin.free.iter().enumerate() {
            trial[n].retract(delta[k].as_slice());
        }
        let change = cost_change(graph, &graph.nodes, &trial, opts.robust)?;
        let accepted = change <= 0.0;
        if accepted {
            graph.nodes = trial;
            let prev = *report.cost_history.last().unwrap();
            let c = prev + change;
            debug_assert!(c <= prev, "LM accepted a cost increase: {prev} -> {c}");
            report.cost_history.push(c);
            lambda = (lambda / 10.0).max(LAMBDA_MIN);
        }
        if step < opts.step_tol {
            report.converged = true;
            break;
        }
        if accepted {
            lin = linearize(graph, opts.robust)?;
        } else {
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                // No descent direction left at machine precision.
                report.converged = true;
                break;
            }
        }
    }
    Ok(report)
}

/// Marginal covariances of every free node, keyed by node index.
fn marginals(graph: &Graph, robust: Robust) -> Result<BTreeMap<usize, DMatrix<f64>>> {
    let lin = linearize(graph, robust)?;
    let blocks = lin.h.factorize()?.inverse_diagonal_blocks();
    Ok(lin.free.into_iter().zip(blocks).collect())
}

/// Marginal covariance of one free node at the current linearization point.
pub fn marginal_covariance(graph: &Graph, node: usize) -> Result<DMatrix<f64>> {
    let n = graph.nodes.get(node).ok_or(Error::UnknownNode(node))?;
    if n.fixed {
        return Err(Error::FixedNode(node));
    }
    marginals(graph, Robust::None)?
        .remove(&node)
        .ok_or(Error::UnknownNode(node))
}

fn collect(graph: &Graph, covs: &BTreeMap<usize, DMatrix<f64>>, report: OptimizeReport) -> FgoSolution {
    let mut sol = FgoSolution {
        t: Vec::new(),
        states: Vec::new(),
        covariances: Vec::new(),
        layouts: Vec::new(),
        degraded: Vec::new(),
        report,
    };
    for (i, n) in graph.epoch_nodes() {
        sol.t.push(n.t);
        sol.states.push(n.state.clone());
        sol.covariances.push(covs.get(&i).cloned().unwrap_or_else(|| DMatrix::zeros(0, 0)));
        sol.layouts.push(n.layout.clone());
        sol.degraded.push(n.degraded);
    }
    sol
}

/// Optimizes the graph in place. With `graph.window == 0` all epochs are
/// solved jointly; otherwise each epoch is estimated from the window ending
/// at it, with the node just before the window held fixed.
///
/// Connectivity is not required: disjoint segments are solved independently.
/// Non-convergence is reported through `report.converged`; the states are
/// the best found.
pub fn optimize(graph: &mut Graph, opts: &LmOptions) -> Result<FgoSolution> {
    graph.check_structure()?;
    if graph.window == 0 {
        let report = solve_batch(graph, opts)?;
        if !report.converged {
            log::warn!("factor graph did not converge in {} iterations", report.iterations);
        }
        let covs = marginals(graph, opts.robust)?;
        return Ok(collect(graph, &covs, report));
    }
    let epoch_idx: Vec<usize> = graph.epoch_nodes().map(|(i, _)| i).collect();
    let base = graph.base_node_index();
    let w = graph.window;
    let mut working = graph.nodes.clone();
    let mut output = graph.nodes.clone();
    let mut covs = BTreeMap::new();
    let mut report = OptimizeReport {
        converged: true,
        ..OptimizeReport::default()
    };
    for k in 0..epoch_idx.len() {
        let start = (k + 1).saturating_sub(w);
        let mut members: Vec<usize> = Vec::new();
        if start > 0 {
            members.push(epoch_idx[start - 1]);
        }
        members.extend_from_slice(&epoch_idx[start..=k]);
        members.extend(base);
        let mut map = vec![None; working.len()];
        for (j, &m) in members.iter().enumerate() {
            map[m] = Some(j);
        }
        let mut nodes: Vec<StateNode> = members.iter().map(|&m| working[m].clone()).collect();
        if start > 0 {
            nodes[0].fixed = true;
        }
        let factors: Vec<Factor> = graph
            .factors
            .iter()
            .filter(|f| f.node_refs.iter().all(|&r| map[r].is_some()))
            .filter(|f| f.node_refs.iter().any(|&r| !nodes[map[r].unwrap()].fixed))
            .map(|f| {
                let mut f = f.clone();
                for r in &mut f.node_refs {
                    *r = map[*r].unwrap();
                }
                f
            })
            .collect();
        let mut sub = Graph {
            nodes,
            factors,
            window: 0,
        };
        let r = solve_batch(&mut sub, opts)?;
        report.iterations += r.iterations;
        report.converged &= r.converged;
        report.cost_history = r.cost_history;
        let m = marginals(&sub, opts.robust)?;
        for (j, &g) in members.iter().enumerate() {
            if !sub.nodes[j].fixed {
                working[g].state = sub.nodes[j].state.clone();
            }
        }
        let end = epoch_idx[k];
        output[end] = working[end].clone();
        if let Some(c) = m.get(&map[end].unwrap()) {
            covs.insert(end, c.clone());
        }
    }
    if !report.converged {
        log::warn!("sliding-window optimization did not converge in every window");
    }
    graph.nodes = output;
    Ok(collect(graph, &covs, report))
}
