//! RTK float EKF on double-differenced pseudorange and carrier phase, with
//! LAMBDA fixing after every update.
//!
//! Ambiguities are carried as rover-minus-base single differences, one state
//! per tracked satellite, so master changes need no state remapping; the
//! double-differenced ambiguities handed to LAMBDA are linear combinations of
//! them.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::ekf::{check_time, predict, velocity_update, EkfConfig, EkfState, Update, POS};
use crate::doppler::VelocitySolution;
use crate::error::{Error, Result};
use crate::evaluate::{SolutionRecord, SolutionStatus};
use crate::lambda::{fix_solution, DEFAULT_RATIO_THRESHOLD};
use crate::measurement::{dd_range, dd_range_gradient, DdEpoch, DdGroup};
use crate::types::{ReceiverState, SatId, LAMBDA_L1};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RtkEkfConfig {
    pub q_acc_horizontal: f64,
    pub q_acc_vertical: f64,
    /// Initial variance of a new single-difference ambiguity (cycles²).
    pub ambiguity_var: f64,
    /// Ambiguity random-walk density (cycles²/s).
    pub ambiguity_q: f64,
    pub ratio_threshold: f64,
    pub init_rate_var: f64,
}

impl Default for RtkEkfConfig {
    fn default() -> Self {
        Self {
            q_acc_horizontal: 1.0,
            q_acc_vertical: 0.1,
            ambiguity_var: 100.0,
            ambiguity_q: 1e-8,
            ratio_threshold: DEFAULT_RATIO_THRESHOLD,
            init_rate_var: 100.0,
        }
    }
}

impl RtkEkfConfig {
    fn kinematics(&self) -> EkfConfig {
        EkfConfig {
            q_acc_horizontal: self.q_acc_horizontal,
            q_acc_vertical: self.q_acc_vertical,
            q_clk: 0.0,
            init_rate_var: self.init_rate_var,
            ..EkfConfig::default()
        }
    }
}

/// Kinematic EKF state (no clocks; the drift slot stays at zero) followed by
/// one single-difference ambiguity per entry of `sats`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RtkEkfState {
    pub filter: EkfState,
    pub sats: Vec<SatId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtkEpochResult {
    pub record: SolutionRecord,
    pub float_pos_m: Vector3<f64>,
    /// Fixed solution when the ratio test passed.
    pub fixed: Option<ReceiverState>,
    pub ratio: f64,
}

impl RtkEkfState {
    pub fn initialize(pos: Vector3<f64>, pos_var: f64, t: f64, vel: Option<&VelocitySolution>, cfg: &RtkEkfConfig) -> Self {
        let mut x = DVector::zeros(7);
        let mut p = DMatrix::zeros(7, 7);
        x.fixed_rows_mut::<3>(POS).copy_from(&pos);
        for i in 0..3 {
            p[(i, i)] = pos_var;
        }
        match vel {
            Some(v) => {
                x.fixed_rows_mut::<3>(3).copy_from(&v.vel_mps);
                p.view_mut((3, 3), (3, 3)).copy_from(&v.velocity_covariance());
            }
            None => {
                for i in 3..6 {
                    p[(i, i)] = cfg.init_rate_var;
                }
            }
        }
        Self {
            filter: EkfState {
                x,
                p,
                t_last: Some(t),
                clocks: Vec::new(),
            },
            sats: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.filter.dim()
    }

    fn amb_base(&self) -> usize {
        self.filter.drift_index() + 1
    }

    pub fn ambiguity_index(&self, s: SatId) -> Option<usize> {
        self.sats.iter().position(|k| *k == s).map(|i| self.amb_base() + i)
    }

    pub fn ambiguity(&self, s: SatId) -> Option<f64> {
        self.ambiguity_index(s).map(|i| self.filter.x[i])
    }

    fn add_ambiguity(&mut self, s: SatId, value: f64, var: f64) {
        let at = self.amb_base() + self.sats.len();
        self.sats.push(s);
        self.filter.insert_state(at, value, var);
    }

    /// Drops a satellite's ambiguity together with its row and column.
    pub fn remove_ambiguity(&mut self, s: SatId) {
        if let Some(i) = self.ambiguity_index(s) {
            self.filter.remove_state(i);
            self.sats.retain(|k| *k != s);
        }
    }
}

/// Brings the ambiguity set in line with the carrier-bearing DD groups: lost
/// satellites are dropped, new ones initialized from carrier minus code.
fn manage_ambiguities(state: &mut RtkEkfState, dd: &DdEpoch, var: f64) {
    let carrier_groups: Vec<&DdGroup> = dd.groups.iter().filter(|g| g.has_carrier()).collect();
    let mut present: Vec<SatId> = Vec::new();
    for g in &carrier_groups {
        present.push(g.master_id);
        present.extend(g.observations.iter().map(|o| o.sat_id));
    }
    for s in state.sats.clone() {
        if !present.contains(&s) {
            state.remove_ambiguity(s);
        }
    }
    for g in carrier_groups {
        let offset = |o: &crate::measurement::DdObservation| (o.dd_carrier_m.unwrap() - o.dd_pseudorange_m) / LAMBDA_L1;
        if state.ambiguity_index(g.master_id).is_none() {
            let master = g
                .observations
                .iter()
                .find_map(|o| state.ambiguity(o.sat_id).map(|a| a - offset(o)))
                .unwrap_or(0.0);
            state.add_ambiguity(g.master_id, master, var);
        }
        let am = state.ambiguity(g.master_id).unwrap();
        for o in &g.observations {
            if state.ambiguity_index(o.sat_id).is_none() {
                state.add_ambiguity(o.sat_id, am + offset(o), var);
            }
        }
    }
}

fn dd_updates(state: &mut RtkEkfState, up: &mut Update, dd: &DdEpoch, base_pos: &Vector3<f64>) -> Result<()> {
    let pos = state.filter.position();
    let n = state.dim();
    for g in &dd.groups {
        let m = g.observations.len();
        let mut h = DMatrix::zeros(m, n);
        let mut r = DVector::zeros(m);
        for (i, o) in g.observations.iter().enumerate() {
            let grad = dd_range_gradient(&pos, &o.sat_pos_m, &o.master_pos_m);
            h.view_mut((i, POS), (1, 3)).copy_from(&grad.transpose());
            r[i] = o.dd_pseudorange_m - dd_range(&pos, &o.sat_pos_m, &o.master_pos_m, base_pos);
        }
        up.whitened(&mut state.filter.p, &h, &r, &g.pseudorange_cov)?;
        if !g.has_carrier() {
            continue;
        }
        let im = state.ambiguity_index(g.master_id).ok_or(Error::MissingAmbiguity(g.master_id))?;
        for (i, o) in g.observations.iter().enumerate() {
            let is = state.ambiguity_index(o.sat_id).ok_or(Error::MissingAmbiguity(o.sat_id))?;
            h[(i, is)] = LAMBDA_L1;
            h[(i, im)] = -LAMBDA_L1;
            let amb = state.filter.x[is] - state.filter.x[im];
            r[i] = o.dd_carrier_m.unwrap() - dd_range(&pos, &o.sat_pos_m, &o.master_pos_m, base_pos) - LAMBDA_L1 * amb;
        }
        up.whitened(&mut state.filter.p, &h, &r, &g.carrier_cov)?;
    }
    Ok(())
}

/// Float state as position plus DD ambiguities, with the matching covariance.
pub fn dd_float_solution(state: &RtkEkfState, dd: &DdEpoch) -> Result<(ReceiverState, Vec<SatId>, DMatrix<f64>)> {
    let mut sats = Vec::new();
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for g in dd.groups.iter().filter(|g| g.has_carrier()) {
        let im = state.ambiguity_index(g.master_id).ok_or(Error::MissingAmbiguity(g.master_id))?;
        for o in &g.observations {
            let is = state.ambiguity_index(o.sat_id).ok_or(Error::MissingAmbiguity(o.sat_id))?;
            sats.push(o.sat_id);
            rows.push((is, im));
        }
    }
    let n = state.dim();
    let mut t = DMatrix::zeros(3 + sats.len(), n);
    for i in 0..3 {
        t[(i, POS + i)] = 1.0;
    }
    for (k, (is, im)) in rows.iter().enumerate() {
        t[(3 + k, *is)] = 1.0;
        t[(3 + k, *im)] = -1.0;
    }
    let x = &t * &state.filter.x;
    let cov = &t * &state.filter.p * t.transpose();
    let mut rs = ReceiverState::at(state.filter.position());
    rs.vel_mps = state.filter.velocity();
    for (k, s) in sats.iter().enumerate() {
        rs.dd_ambiguities_cycles.insert(*s, x[3 + k]);
    }
    Ok((rs, sats, 0.5 * (&cov + cov.transpose())))
}

/// One predict/update cycle followed by an attempt to fix the DD ambiguities.
pub fn ekf_rtk_step(
    mut state: RtkEkfState,
    dd: &DdEpoch,
    base_pos: &Vector3<f64>,
    vel: Option<&VelocitySolution>,
    cfg: &RtkEkfConfig,
) -> Result<(RtkEkfState, RtkEpochResult)> {
    let dt = check_time(&state.filter, dd.t)?;
    if dd.is_empty() {
        return Err(Error::InsufficientCommonSatellites);
    }
    predict(&mut state.filter, dt, &cfg.kinematics(), cfg.ambiguity_q)?;
    manage_ambiguities(&mut state, dd, cfg.ambiguity_var);
    let mut up = Update::new(&state.filter, None);
    dd_updates(&mut state, &mut up, dd, base_pos)?;
    if let Some(v) = vel {
        velocity_update(&mut state.filter, &mut up, v)?;
    }
    up.apply(&mut state.filter);
    state.filter.t_last = Some(dd.t);

    let float_pos = state.filter.position();
    let (float, sats, cov) = dd_float_solution(&state, dd)?;
    let fix = fix_solution(&float, &sats, &cov, cfg.ratio_threshold)?;
    let (pos, status) = if fix.fixed {
        (fix.state.pos_m, SolutionStatus::RtkFixed)
    } else {
        (float_pos, SolutionStatus::RtkFloat)
    };
    let result = RtkEpochResult {
        record: SolutionRecord::new(dd.t, pos, status, dd.n_common),
        float_pos_m: float_pos,
        fixed: fix.fixed.then_some(fix.state),
        ratio: fix.ratio,
    };
    Ok((state, result))
}
