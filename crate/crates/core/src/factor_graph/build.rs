use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::{Factor, FactorKind, FactorModel, Graph, NodeLayout, StateNode};
use crate::baselines::wls::{weighting_elevation, wls_spp};
use crate::doppler::VelocitySolution;
use crate::error::{Error, Result};
use crate::measurement::{dd_range, DdEpoch, WeightModel};
use crate::types::{Epoch, ReceiverState, SatId, LAMBDA_L1};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FgoConfig {
    /// Pseudorange weight model for SPP graphs.
    pub weights: WeightModel,
    /// Largest allowed time step between consecutive nodes (s).
    pub max_gap_s: f64,
    /// Multiplier applied to the Doppler velocity covariance.
    pub dv_cov_inflation: f64,
    /// Variance added per axis to velocity factors, covering motion that the
    /// finite-difference model cannot represent ((m/s)²).
    pub velocity_floor_var: f64,
    /// Sliding-window length in epochs; 0 solves the full batch.
    pub window: usize,
    /// Tie ambiguities of consecutive epochs that share satellite and master.
    pub link_ambiguities: bool,
    pub ambiguity_link_sigma_cycles: f64,
}

impl Default for FgoConfig {
    fn default() -> Self {
        Self {
            weights: WeightModel::pseudorange(),
            max_gap_s: 5.0,
            dv_cov_inflation: 2.0,
            velocity_floor_var: 1e-4,
            window: 0,
            link_ambiguities: false,
            ambiguity_link_sigma_cycles: 0.01,
        }
    }
}

/// `L⁻¹` for `Σ = L·Lᵀ`, so that `‖L⁻¹·r‖²` is the Mahalanobis norm.
pub fn sqrt_information(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let l = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite)?.unpack();
    l.solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::NotPositiveDefinite)
}

fn velocity_factor(
    cfg: &FgoConfig,
    a: usize,
    b: usize,
    dt: f64,
    va: Option<&VelocitySolution>,
    vb: Option<&VelocitySolution>,
) -> Result<Factor> {
    // The velocity at the start of the interval is preferred; the end-point
    // solution stands in when it is missing.
    let v = va.or(vb).ok_or(Error::DisconnectedGraph)?;
    let (z, cov) = (v.vel_mps, v.velocity_covariance());
    let cov = cov * cfg.dv_cov_inflation + nalgebra::Matrix3::identity() * cfg.velocity_floor_var;
    let cov = DMatrix::from_fn(3, 3, |i, j| cov[(i, j)]);
    Ok(Factor {
        kind: FactorKind::DopplerVelocity,
        node_refs: vec![a, b],
        measurement: DVector::from_column_slice(z.as_slice()),
        sqrt_info: sqrt_information(&cov)?,
        model: FactorModel::DopplerVelocity { dt },
    })
}

fn check_inputs(times: &[f64], n_vel: usize, cfg: &FgoConfig) -> Result<()> {
    if times.is_empty() {
        return Err(Error::EmptyInput);
    }
    if n_vel != times.len() {
        return Err(Error::InvalidConfig(format!(
            "{} velocity entries for {} epochs",
            n_vel,
            times.len()
        )));
    }
    for w in times.windows(2) {
        let gap = w[1] - w[0];
        if gap <= 0.0 {
            return Err(Error::TimeReversal { t: w[1], t_last: w[0] });
        }
        if gap > cfg.max_gap_s {
            return Err(Error::GapTooLarge {
                gap,
                max_gap: cfg.max_gap_s,
            });
        }
    }
    Ok(())
}

fn attach_velocity(state: &mut ReceiverState, v: Option<&VelocitySolution>) {
    if let Some(v) = v {
        state.vel_mps = v.vel_mps;
        state.clock_drift_mps = v.clock_drift_mps;
    }
}

/// SPP graph: one node per epoch, pseudorange factors on each node and a
/// velocity factor between consecutive nodes. Nodes start at the WLS fix;
/// epochs where WLS fails are bridged with the Doppler velocity.
pub fn build_spp_graph(
    epochs: &[Epoch],
    velocities: &[Option<VelocitySolution>],
    cfg: &FgoConfig,
) -> Result<Graph> {
    let times: Vec<f64> = epochs.iter().map(|e| e.t).collect();
    check_inputs(&times, velocities.len(), cfg)?;
    cfg.weights.validate()?;

    let mut init: Vec<Option<ReceiverState>> = Vec::with_capacity(epochs.len());
    let mut prev: Option<Vector3<f64>> = None;
    for e in epochs {
        let s = wls_spp(e, &cfg.weights, prev).ok().map(|s| s.state);
        if let Some(s) = &s {
            prev = Some(s.pos_m);
        }
        init.push(s);
    }
    let first = init
        .iter()
        .position(Option::is_some)
        .ok_or(Error::InsufficientSatellites {
            needed: 4,
            available: epochs.iter().map(|e| e.observations.len()).max().unwrap_or(0),
        })?;
    let mut positions = vec![Vector3::zeros(); epochs.len()];
    positions[first] = init[first].as_ref().unwrap().pos_m;
    for i in (0..first).rev() {
        positions[i] = positions[i + 1];
    }
    for i in first + 1..epochs.len() {
        positions[i] = match &init[i] {
            Some(s) => s.pos_m,
            None => {
                let v = velocities[i - 1]
                    .as_ref()
                    .or(velocities[i].as_ref())
                    .map(|v| v.vel_mps)
                    .unwrap_or_else(Vector3::zeros);
                positions[i - 1] + v * (times[i] - times[i - 1])
            }
        };
    }

    let mut graph = Graph {
        window: cfg.window,
        ..Graph::default()
    };
    for (i, e) in epochs.iter().enumerate() {
        let pos = positions[i];
        let mut state = ReceiverState::at(pos);
        let clocks = e.constellations();
        for c in &clocks {
            let clk = match &init[i] {
                Some(s) => s.clock_for(*c),
                None => {
                    let res: Vec<f64> = e
                        .observations
                        .iter()
                        .filter(|o| o.sat_id.constellation == *c)
                        .map(|o| o.corrected_pseudorange() - (o.sat_pos_m - pos).norm())
                        .collect();
                    res.iter().sum::<f64>() / res.len() as f64
                }
            };
            state.clock_bias_m.insert(*c, clk);
        }
        attach_velocity(&mut state, velocities[i].as_ref());
        graph.nodes.push(StateNode {
            epoch_index: Some(i),
            t: e.t,
            state,
            layout: NodeLayout {
                clocks,
                ambiguities: Vec::new(),
            },
            fixed: false,
            initialized: true,
            degraded: e.observations.len() < 4,
        });
        for o in &e.observations {
            let el = weighting_elevation(&o.sat_pos_m, &pos);
            let var = cfg.weights.variance(el, o.snr_dbhz)?;
            graph.factors.push(Factor {
                kind: FactorKind::Pseudorange,
                node_refs: vec![i],
                measurement: DVector::from_element(1, o.corrected_pseudorange()),
                sqrt_info: DMatrix::from_element(1, 1, 1.0 / var.sqrt()),
                model: FactorModel::Pseudorange {
                    sat_id: o.sat_id,
                    sat_pos: o.sat_pos_m,
                },
            });
        }
        if i > 0 {
            graph.factors.push(velocity_factor(
                cfg,
                i - 1,
                i,
                times[i] - times[i - 1],
                velocities[i - 1].as_ref(),
                velocities[i].as_ref(),
            )?);
        }
    }
    Ok(graph)
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Adds DD factors for the rows `idx` of a group: one block factor with the
/// full covariance, or one factor per row when the covariance is diagonal.
fn push_dd_factors(
    graph: &mut Graph,
    node: usize,
    kind: FactorKind,
    rows: &[(SatId, Vector3<f64>, f64)],
    idx: &[usize],
    cov: &DMatrix<f64>,
    master_pos: Vector3<f64>,
) -> Result<()> {
    if idx.is_empty() {
        return Ok(());
    }
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| cov[(idx[i], idx[j])]);
    let blocks: Vec<Vec<usize>> = if is_diagonal(&sub) {
        (0..idx.len()).map(|i| vec![i]).collect()
    } else {
        vec![(0..idx.len()).collect()]
    };
    for b in blocks {
        let c = DMatrix::from_fn(b.len(), b.len(), |i, j| sub[(b[i], b[j])]);
        graph.factors.push(Factor {
            kind,
            node_refs: vec![node],
            measurement: DVector::from_iterator(b.len(), b.iter().map(|&i| rows[idx[i]].2)),
            sqrt_info: sqrt_information(&c)?,
            model: FactorModel::DoubleDifference {
                sats: b.iter().map(|&i| (rows[idx[i]].0, rows[idx[i]].1)).collect(),
                master_pos,
            },
        });
    }
    Ok(())
}

/// RTK-float graph over DD epochs. Nodes hold position and one float
/// ambiguity per carrier-tracked DD satellite; the base station is appended
/// as a fixed node. Positions start at `init` or at the base position.
pub fn build_rtk_graph(
    dd: &[DdEpoch],
    velocities: &[Option<VelocitySolution>],
    base_pos: Vector3<f64>,
    cfg: &FgoConfig,
    init: Option<&[Vector3<f64>]>,
) -> Result<Graph> {
    let times: Vec<f64> = dd.iter().map(|e| e.t).collect();
    check_inputs(&times, velocities.len(), cfg)?;
    if let Some(p) = init {
        if p.len() != dd.len() {
            return Err(Error::InvalidConfig("initial positions do not match epochs".into()));
        }
    }
    let mut graph = Graph {
        window: cfg.window,
        ..Graph::default()
    };
    let mut masters: Vec<BTreeMap<SatId, SatId>> = Vec::with_capacity(dd.len());
    for (i, e) in dd.iter().enumerate() {
        let pos = init.map(|p| p[i]).unwrap_or(base_pos);
        let mut state = ReceiverState::at(pos);
        attach_velocity(&mut state, velocities[i].as_ref());
        let mut layout = NodeLayout::default();
        let mut m = BTreeMap::new();
        for o in e.observations() {
            if let Some(cp) = o.dd_carrier_m {
                let n0 = match init {
                    Some(_) => (cp - dd_range(&pos, &o.sat_pos_m, &o.master_pos_m, &base_pos)) / LAMBDA_L1,
                    None => (cp - o.dd_pseudorange_m) / LAMBDA_L1,
                };
                layout.ambiguities.push(o.sat_id);
                state.dd_ambiguities_cycles.insert(o.sat_id, n0);
                m.insert(o.sat_id, o.master_id);
            }
        }
        masters.push(m);
        graph.nodes.push(StateNode {
            epoch_index: Some(i),
            t: e.t,
            state,
            layout,
            fixed: false,
            initialized: true,
            degraded: e.n_common < 4,
        });
        for g in &e.groups {
            let master_pos = match g.observations.first() {
                Some(o) => o.master_pos_m,
                None => continue,
            };
            let pr: Vec<_> = g
                .observations
                .iter()
                .map(|o| (o.sat_id, o.sat_pos_m, o.dd_pseudorange_m))
                .collect();
            let all: Vec<usize> = (0..pr.len()).collect();
            push_dd_factors(&mut graph, i, FactorKind::DdPseudorange, &pr, &all, &g.pseudorange_cov, master_pos)?;
            let cp: Vec<_> = g
                .observations
                .iter()
                .map(|o| (o.sat_id, o.sat_pos_m, o.dd_carrier_m.unwrap_or(0.0)))
                .collect();
            let with_cp: Vec<usize> = g
                .observations
                .iter()
                .enumerate()
                .filter(|(_, o)| o.dd_carrier_m.is_some())
                .map(|(k, _)| k)
                .collect();
            push_dd_factors(&mut graph, i, FactorKind::DdCarrier, &cp, &with_cp, &g.carrier_cov, master_pos)?;
        }
        if i > 0 {
            graph.factors.push(velocity_factor(
                cfg,
                i - 1,
                i,
                times[i] - times[i - 1],
                velocities[i - 1].as_ref(),
                velocities[i].as_ref(),
            )?);
            if cfg.link_ambiguities {
                let shared: Vec<SatId> = masters[i]
                    .iter()
                    .filter(|(s, w)| masters[i - 1].get(s) == Some(w))
                    .map(|(s, _)| *s)
                    .collect();
                if !shared.is_empty() {
                    let n = shared.len();
                    graph.factors.push(Factor {
                        kind: FactorKind::AmbiguityLink,
                        node_refs: vec![i - 1, i],
                        measurement: DVector::zeros(n),
                        sqrt_info: DMatrix::identity(n, n) / cfg.ambiguity_link_sigma_cycles,
                        model: FactorModel::AmbiguityLink { sats: shared },
                    });
                }
            }
        }
    }
    graph.nodes.push(StateNode {
        epoch_index: None,
        t: times[0],
        state: ReceiverState::at(base_pos),
        layout: NodeLayout::default(),
        fixed: true,
        initialized: true,
        degraded: false,
    });
    Ok(graph)
}
