//! Factor-graph formulation of SPP and RTK-float estimation.
//!
//! Each epoch is a state node. Pseudorange and double-difference factors attach
//! to one node; Doppler-velocity factors tie consecutive nodes through the
//! finite difference of their positions. The normal equations of such a chain
//! are block-tridiagonal, which [`linear::BlockTridiagonal`] exploits.
//!
//! Optimized variables per node are the position, one clock bias per observed
//! constellation (SPP) and the per-epoch DD ambiguities (RTK). Node velocity
//! and clock drift are carried from the Doppler solution: no factor in the
//! objective constrains them.

mod build;
pub mod linear;
mod optimize;

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::measurement::dd_range;
use crate::types::{Constellation, ReceiverState, SatId, LAMBDA_L1};

pub use build::{build_rtk_graph, build_spp_graph, sqrt_information, FgoConfig};
pub use optimize::{
    linearize, marginal_covariance, optimize, FgoSolution, LinearSystem, LmOptions,
    OptimizeReport, Robust,
};

/// Layout of a node's free variables: position, clocks, then ambiguities.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeLayout {
    pub clocks: Vec<Constellation>,
    pub ambiguities: Vec<SatId>,
}

impl NodeLayout {
    pub fn dim(&self) -> usize {
        3 + self.clocks.len() + self.ambiguities.len()
    }

    pub fn clock_index(&self, c: Constellation) -> Option<usize> {
        self.clocks.iter().position(|x| *x == c).map(|i| 3 + i)
    }

    pub fn ambiguity_index(&self, s: SatId) -> Option<usize> {
        self.ambiguities
            .iter()
            .position(|x| *x == s)
            .map(|i| 3 + self.clocks.len() + i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateNode {
    /// Epoch this node belongs to; `None` for the reference station.
    pub epoch_index: Option<usize>,
    pub t: f64,
    pub state: ReceiverState,
    pub layout: NodeLayout,
    /// Fixed nodes contribute no columns to the linear system.
    pub fixed: bool,
    pub initialized: bool,
    /// Fewer than four satellites were available at this epoch.
    pub degraded: bool,
}

impl StateNode {
    pub fn dim(&self) -> usize {
        if self.fixed {
            0
        } else {
            self.layout.dim()
        }
    }

    /// Applies an increment laid out per [`NodeLayout`].
    pub fn retract(&mut self, delta: &[f64]) {
        self.state.pos_m += Vector3::new(delta[0], delta[1], delta[2]);
        for (i, c) in self.layout.clocks.iter().enumerate() {
            *self.state.clock_bias_m.entry(*c).or_insert(0.0) += delta[3 + i];
        }
        let off = 3 + self.layout.clocks.len();
        for (i, s) in self.layout.ambiguities.iter().enumerate() {
            *self.state.dd_ambiguities_cycles.entry(*s).or_insert(0.0) += delta[off + i];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Pseudorange,
    DopplerVelocity,
    DdPseudorange,
    DdCarrier,
    /// Between-epoch ambiguity equality (optional extension).
    AmbiguityLink,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorModel {
    Pseudorange {
        sat_id: SatId,
        sat_pos: Vector3<f64>,
    },
    DopplerVelocity {
        dt: f64,
    },
    /// One row per non-master satellite of a constellation group.
    DoubleDifference {
        sats: Vec<(SatId, Vector3<f64>)>,
        master_pos: Vector3<f64>,
    },
    AmbiguityLink {
        sats: Vec<SatId>,
    },
}

/// A whitened residual block `sqrt_info·(z − h(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub node_refs: Vec<usize>,
    pub measurement: DVector<f64>,
    pub sqrt_info: DMatrix<f64>,
    pub model: FactorModel,
}

/// Residual and per-node Jacobians of one factor, before whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorEvaluation {
    pub residual: DVector<f64>,
    /// `∂residual/∂node` for each entry of `node_refs`, columns per [`NodeLayout`].
    pub jacobians: Vec<DMatrix<f64>>,
}

impl Factor {
    pub fn dim(&self) -> usize {
        self.measurement.len()
    }

    pub fn evaluate(&self, nodes: &[StateNode], base_pos: Option<&Vector3<f64>>) -> Result<FactorEvaluation> {
        let node = |k: usize| -> Result<&StateNode> {
            let idx = self.node_refs[k];
            let n = nodes.get(idx).ok_or(Error::UnknownNode(idx))?;
            if !n.initialized {
                return Err(Error::UninitializedNode(idx));
            }
            Ok(n)
        };
        match &self.model {
            FactorModel::Pseudorange { sat_id, sat_pos } => {
                let n = node(0)?;
                let d = sat_pos - n.state.pos_m;
                let range = d.norm();
                if range < 1.0 {
                    return Err(Error::DegenerateGeometry("satellite and receiver coincide"));
                }
                let e = d / range;
                let c = sat_id.constellation;
                let r = self.measurement[0] - (range + n.state.clock_for(c));
                let mut j = DMatrix::zeros(1, n.layout.dim());
                j[(0, 0)] = e.x;
                j[(0, 1)] = e.y;
                j[(0, 2)] = e.z;
                if let Some(ci) = n.layout.clock_index(c) {
                    j[(0, ci)] = -1.0;
                }
                Ok(FactorEvaluation {
                    residual: DVector::from_element(1, r),
                    jacobians: vec![j],
                })
            }
            FactorModel::DopplerVelocity { dt } => {
                let a = node(0)?;
                let b = node(1)?;
                let v = (b.state.pos_m - a.state.pos_m) / *dt;
                let r = DVector::from_fn(3, |i, _| self.measurement[i] - v[i]);
                let mut ja = DMatrix::zeros(3, a.layout.dim());
                let mut jb = DMatrix::zeros(3, b.layout.dim());
                for i in 0..3 {
                    ja[(i, i)] = 1.0 / dt;
                    jb[(i, i)] = -1.0 / dt;
                }
                Ok(FactorEvaluation {
                    residual: r,
                    jacobians: vec![ja, jb],
                })
            }
            FactorModel::DoubleDifference { sats, master_pos } => {
                let n = node(0)?;
                let base = base_pos.ok_or(Error::DegenerateGeometry("graph has no base node"))?;
                let p = n.state.pos_m;
                let carrier = self.kind == FactorKind::DdCarrier;
                let mut r = DVector::zeros(sats.len());
                let mut j = DMatrix::zeros(sats.len(), n.layout.dim());
                let ew = (master_pos - p).normalize();
                for (i, (sat_id, sat_pos)) in sats.iter().enumerate() {
                    let mut pred = dd_range(&p, sat_pos, master_pos, base);
                    let es = (sat_pos - p).normalize();
                    let g = es - ew;
                    j[(i, 0)] = g.x;
                    j[(i, 1)] = g.y;
                    j[(i, 2)] = g.z;
                    if carrier {
                        let ai = n
                            .layout
                            .ambiguity_index(*sat_id)
                            .ok_or(Error::MissingAmbiguity(*sat_id))?;
                        pred += LAMBDA_L1 * n.state.dd_ambiguities_cycles[sat_id];
                        j[(i, ai)] = -LAMBDA_L1;
                    }
                    r[i] = self.measurement[i] - pred;
                }
                Ok(FactorEvaluation {
                    residual: r,
                    jacobians: vec![j],
                })
            }
            FactorModel::AmbiguityLink { sats } => {
                let a = node(0)?;
                let b = node(1)?;
                let mut r = DVector::zeros(sats.len());
                let mut ja = DMatrix::zeros(sats.len(), a.layout.dim());
                let mut jb = DMatrix::zeros(sats.len(), b.layout.dim());
                for (i, s) in sats.iter().enumerate() {
                    let na = a.state.dd_ambiguities_cycles[s];
                    let nb = b.state.dd_ambiguities_cycles[s];
                    r[i] = self.measurement[i] - (nb - na);
                    ja[(i, a.layout.ambiguity_index(*s).ok_or(Error::MissingAmbiguity(*s))?)] = 1.0;
                    jb[(i, b.layout.ambiguity_index(*s).ok_or(Error::MissingAmbiguity(*s))?)] = -1.0;
                }
                Ok(FactorEvaluation {
                    residual: r,
                    jacobians: vec![ja, jb],
                })
            }
        }
    }

    /// `h(new) − h(old)`, evaluated without forming the large ranges so that
    /// sub-nanometre changes survive.
    pub fn prediction_change(&self, old: &[StateNode], new: &[StateNode]) -> DVector<f64> {
        let pair = |k: usize| (&old[self.node_refs[k]], &new[self.node_refs[k]]);
        match &self.model {
            FactorModel::Pseudorange { sat_id, sat_pos } => {
                let (a, b) = pair(0);
                let c = sat_id.constellation;
                DVector::from_element(
                    1,
                    range_change(sat_pos, &a.state.pos_m, &b.state.pos_m)
                        + (b.state.clock_for(c) - a.state.clock_for(c)),
                )
            }
            FactorModel::DopplerVelocity { dt } => {
                let (a0, a1) = pair(0);
                let (b0, b1) = pair(1);
                let d = ((b1.state.pos_m - b0.state.pos_m) - (a1.state.pos_m - a0.state.pos_m)) / *dt;
                DVector::from_column_slice(d.as_slice())
            }
            FactorModel::DoubleDifference { sats, master_pos } => {
                let (a, b) = pair(0);
                let dm = range_change(master_pos, &a.state.pos_m, &b.state.pos_m);
                DVector::from_iterator(
                    sats.len(),
                    sats.iter().map(|(id, sp)| {
                        let mut d = range_change(sp, &a.state.pos_m, &b.state.pos_m) - dm;
                        if self.kind == FactorKind::DdCarrier {
                            let n0 = a.state.dd_ambiguities_cycles.get(id).copied().unwrap_or(0.0);
                            let n1 = b.state.dd_ambiguities_cycles.get(id).copied().unwrap_or(0.0);
                            d += LAMBDA_L1 * (n1 - n0);
                        }
                        d
                    }),
                )
            }
            FactorModel::AmbiguityLink { sats } => {
                let (a0, a1) = pair(0);
                let (b0, b1) = pair(1);
                let amb = |n: &StateNode, s: &SatId| n.state.dd_ambiguities_cycles.get(s).copied().unwrap_or(0.0);
                DVector::from_iterator(
                    sats.len(),
                    sats.iter()
                        .map(|s| (amb(b1, s) - amb(b0, s)) - (amb(a1, s) - amb(a0, s))),
                )
            }
        }
    }

    /// `‖sqrt_info·(z − h(x))‖²`.
    pub fn squared_error(&self, nodes: &[StateNode], base_pos: Option<&Vector3<f64>>) -> Result<f64> {
        let ev = self.evaluate(nodes, base_pos)?;
        Ok((&self.sqrt_info * ev.residual).norm_squared())
    }
}

/// `‖s − p1‖ − ‖s − p0‖` as `(p0 − p1)·(2s − p0 − p1) / (‖s − p1‖ + ‖s − p0‖)`.
fn range_change(s: &Vector3<f64>, p0: &Vector3<f64>, p1: &Vector3<f64>) -> f64 {
    let d = p0 - p1;
    if d == Vector3::zeros() {
        return 0.0;
    }
    d.dot(&(2.0 * s - p0 - p1)) / ((s - p1).norm() + (s - p0).norm())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub nodes: Vec<StateNode>,
    pub factors: Vec<Factor>,
    /// Sliding-window length in epochs; 0 solves the full batch.
    pub window: usize,
}

impl Graph {
    pub fn base_node_index(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.epoch_index.is_none())
    }

    pub fn base_position(&self) -> Option<Vector3<f64>> {
        self.base_node_index().map(|i| self.nodes[i].state.pos_m)
    }

    pub fn epoch_nodes(&self) -> impl Iterator<Item = (usize, &StateNode)> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.epoch_index.is_some())
    }

    pub fn count(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind == kind).count()
    }

    /// Residual rows contributed by factors of one kind.
    pub fn rows(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind == kind).map(Factor::dim).sum()
    }

    /// Number of free variables.
    pub fn dim(&self) -> usize {
        self.nodes.iter().map(StateNode::dim).sum()
    }

    /// Moves a free node. Fixed nodes are immutable.
    pub fn set_node_position(&mut self, idx: usize, pos: Vector3<f64>) -> Result<()> {
        let n = self.nodes.get_mut(idx).ok_or(Error::UnknownNode(idx))?;
        if n.fixed {
            return Err(Error::FixedNode(idx));
        }
        n.state.pos_m = pos;
        n.initialized = true;
        Ok(())
    }

    /// Sum of squared whitened residuals, the objective being minimized.
    pub fn objective(&self) -> Result<f64> {
        let base = self.base_position();
        self.factors
            .iter()
            .map(|f| f.squared_error(&self.nodes, base.as_ref()))
            .sum()
    }

    /// Structural checks plus connectivity: every epoch node must be reachable
    /// from the first one through two-node factors.
    pub fn validate(&self) -> Result<()> {
        self.check_structure()?;
        if !self.is_connected() {
            return Err(Error::DisconnectedGraph);
        }
        Ok(())
    }

    /// References exist, arity matches the factor kind, and `sqrt_info` is square.
    pub fn check_structure(&self) -> Result<()> {
        for f in &self.factors {
            for &r in &f.node_refs {
                if r >= self.nodes.len() {
                    return Err(Error::UnknownNode(r));
                }
            }
            let arity = match f.kind {
                FactorKind::DopplerVelocity | FactorKind::AmbiguityLink => 2,
                _ => 1,
            };
            if f.node_refs.len() != arity {
                return Err(Error::NonChainFactor);
            }
            if f.sqrt_info.nrows() != f.dim() || f.sqrt_info.ncols() != f.dim() {
                return Err(Error::DegenerateGeometry("sqrt_info shape mismatch"));
            }
        }
        if self.epoch_nodes().next().is_none() {
            return Err(Error::EmptyInput);
        }
        Ok(())
    }

    pub fn is_connected(&self) -> bool {
        let epoch_nodes: Vec<usize> = self.epoch_nodes().map(|(i, _)| i).collect();
        let Some(&start) = epoch_nodes.first() else {
            return true;
        };
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for f in &self.factors {
            if f.node_refs.len() == 2 {
                adj[f.node_refs[0]].push(f.node_refs[1]);
                adj[f.node_refs[1]].push(f.node_refs[0]);
            }
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        epoch_nodes.iter().all(|&i| seen[i])
    }
}
