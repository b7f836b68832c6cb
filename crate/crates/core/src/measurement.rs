//! Observation models, the elevation/SNR weighting model and double differencing.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::elevation_angle;
use crate::types::{Constellation, Epoch, ReceiverState, SatId, SatObservation, LAMBDA_L1};

/// Elevation/SNR variance model:
/// `σ² = σ0²·(a + b/sin²el)·10^((S0 − SNR)/k)`, floored at `σ0²·a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightModel {
    pub sigma0_m: f64,
    pub el_a: f64,
    pub el_b: f64,
    pub snr_s0_dbhz: f64,
    pub snr_k: f64,
}

impl WeightModel {
    pub const fn with_sigma0(sigma0_m: f64) -> Self {
        Self {
            sigma0_m,
            el_a: 1.0,
            el_b: 1.0,
            snr_s0_dbhz: 45.0,
            snr_k: 30.0,
        }
    }

    pub const fn pseudorange() -> Self {
        Self::with_sigma0(3.0)
    }

    pub const fn carrier() -> Self {
        Self::with_sigma0(0.01)
    }

    /// Doppler range-rate model (m/s).
    pub const fn doppler() -> Self {
        Self::with_sigma0(0.1)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("sigma0_m", self.sigma0_m),
            ("el_a", self.el_a),
            ("el_b", self.el_b),
            ("snr_s0_dbhz", self.snr_s0_dbhz),
            ("snr_k", self.snr_k),
        ];
        for (field, value) in fields {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::FieldOutOfRange { field, value });
            }
        }
        Ok(())
    }

    pub fn variance(&self, elevation: f64, snr_dbhz: f64) -> Result<f64> {
        measurement_variance(self, elevation, snr_dbhz)
    }
}

impl Default for WeightModel {
    fn default() -> Self {
        Self::pseudorange()
    }
}

pub fn measurement_variance(model: &WeightModel, elevation: f64, snr_dbhz: f64) -> Result<f64> {
    if !(elevation > 0.0) {
        return Err(Error::InvalidElevation(elevation));
    }
    let el = elevation.min(std::f64::consts::FRAC_PI_2);
    let s = el.sin();
    let s0 = model.sigma0_m * model.sigma0_m;
    let snr_factor = 10f64.powf((model.snr_s0_dbhz - snr_dbhz.max(0.0)) / model.snr_k);
    let var = s0 * (model.el_a + model.el_b / (s * s)) * snr_factor;
    Ok(var.max(s0 * model.el_a))
}

/// `‖p^s − p_r‖ + δ_r` for the satellite's constellation. Compare against
/// [`SatObservation::corrected_pseudorange`].
pub fn pseudorange_predict(state: &ReceiverState, sat: &SatObservation) -> Result<f64> {
    let range = (sat.sat_pos_m - state.pos_m).norm();
    if !(range >= 1.0) {
        return Err(Error::DegenerateGeometry("satellite and receiver coincide"));
    }
    Ok(range + state.clock_for(sat.sat_id.constellation))
}

/// Highest-elevation satellite; ties go to the lowest id.
pub fn select_master(elevations: &[(SatId, f64)]) -> Result<SatId> {
    if elevations.len() < 2 {
        return Err(Error::InsufficientCommonSatellites);
    }
    let mut best = elevations[0];
    for &(id, el) in &elevations[1..] {
        if el > best.1 || (el == best.1 && id < best.0) {
            best = (id, el);
        }
    }
    Ok(best.0)
}

/// One double-differenced observation against the constellation's master satellite.
#[derive(Debug, Clone, PartialEq)]
pub struct DdObservation {
    pub sat_id: SatId,
    pub master_id: SatId,
    pub dd_pseudorange_m: f64,
    /// `λ·[(ψ_r^s − ψ_b^s) − (ψ_r^w − ψ_b^w)]`, absent without carrier on all four legs.
    pub dd_carrier_m: Option<f64>,
    /// Diagonal entry of the DD pseudorange covariance.
    pub covariance_m2: f64,
    /// Diagonal entry of the DD carrier covariance.
    pub carrier_covariance_m2: f64,
    pub sat_pos_m: Vector3<f64>,
    pub master_pos_m: Vector3<f64>,
}

/// All DD observations of one constellation at one epoch, with the full covariance
/// of the group (shared master makes it non-diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct DdGroup {
    pub constellation: Constellation,
    pub master_id: SatId,
    pub observations: Vec<DdObservation>,
    pub pseudorange_cov: DMatrix<f64>,
    pub carrier_cov: DMatrix<f64>,
}

impl DdGroup {
    pub fn has_carrier(&self) -> bool {
        self.observations.iter().all(|o| o.dd_carrier_m.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdEpoch {
    pub t: f64,
    pub groups: Vec<DdGroup>,
    /// Common satellites above the horizon, masters included.
    pub n_common: usize,
}

impl DdEpoch {
    pub fn observations(&self) -> impl Iterator<Item = &DdObservation> {
        self.groups.iter().flat_map(|g| g.observations.iter())
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.observations.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdOptions {
    pub pseudorange_weights: WeightModel,
    pub carrier_weights: WeightModel,
    /// Keep only the diagonal of the DD covariance.
    pub diagonal_dd_cov: bool,
    /// Largest accepted rover/base time offset (s); half the nominal interval.
    pub max_time_offset_s: f64,
}

impl Default for DdOptions {
    fn default() -> Self {
        Self {
            pseudorange_weights: WeightModel::pseudorange(),
            carrier_weights: WeightModel::carrier(),
            diagonal_dd_cov: false,
            max_time_offset_s: 0.5,
        }
    }
}

/// Forms per-constellation double differences between rover and base epochs.
///
/// Elevations for master selection and weighting are evaluated at `base_pos`,
/// which for short baselines matches the rover's view.
pub fn form_double_differences(
    rover: &Epoch,
    base: &Epoch,
    base_pos: &Vector3<f64>,
    opts: &DdOptions,
) -> Result<DdEpoch> {
    if !((rover.t - base.t).abs() <= opts.max_time_offset_s) {
        return Err(Error::EpochMismatch {
            rover: rover.t,
            base: base.t,
        });
    }
    let mut groups = Vec::new();
    let mut n_common = 0;
    for constellation in rover.constellations() {
        let mut common: Vec<(&SatObservation, &SatObservation, f64)> = Vec::new();
        for r in rover
            .observations
            .iter()
            .filter(|o| o.sat_id.constellation == constellation)
        {
            if let Some(b) = base.get(r.sat_id) {
                let el = elevation_angle(&r.sat_pos_m, base_pos)?;
                if el > 0.0 {
                    common.push((r, b, el));
                }
            }
        }
        n_common += common.len();
        if common.len() < 2 {
            continue;
        }
        let els: Vec<(SatId, f64)> = common.iter().map(|(r, _, el)| (r.sat_id, *el)).collect();
        let master_id = select_master(&els)?;
        let mi = common.iter().position(|(r, _, _)| r.sat_id == master_id).unwrap();
        groups.push(difference_group(constellation, &common, mi, opts)?);
    }
    if groups.is_empty() {
        return Err(Error::InsufficientCommonSatellites);
    }
    Ok(DdEpoch {
        t: rover.t,
        groups,
        n_common,
    })
}

fn difference_group(
    constellation: Constellation,
    common: &[(&SatObservation, &SatObservation, f64)],
    mi: usize,
    opts: &DdOptions,
) -> Result<DdGroup> {
    let (mr, mb, _) = common[mi];
    let master_sd_pr = mr.pseudorange_m - mb.pseudorange_m;
    let master_sd_cp = match (mr.carrier_phase_cycles, mb.carrier_phase_cycles) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };

    // Undifferenced variances, rover and base summed per satellite (single difference).
    let mut pr_sd_var = Vec::with_capacity(common.len());
    let mut cp_sd_var = Vec::with_capacity(common.len());
    for (r, b, el) in common {
        let pw = &opts.pseudorange_weights;
        let cw = &opts.carrier_weights;
        pr_sd_var.push(pw.variance(*el, r.snr_dbhz)? + pw.variance(*el, b.snr_dbhz)?);
        cp_sd_var.push(cw.variance(*el, r.snr_dbhz)? + cw.variance(*el, b.snr_dbhz)?);
    }

    let m = common.len() - 1;
    let mut observations = Vec::with_capacity(m);
    let mut others = Vec::with_capacity(m);
    for (i, (r, b, _)) in common.iter().enumerate() {
        if i == mi {
            continue;
        }
        others.push(i);
        let dd_pr = (r.pseudorange_m - b.pseudorange_m) - master_sd_pr;
        let dd_cp = match (r.carrier_phase_cycles, b.carrier_phase_cycles, master_sd_cp) {
            (Some(a), Some(c), Some(msd)) => Some(LAMBDA_L1 * ((a - c) - msd)),
            _ => None,
        };
        observations.push(DdObservation {
            sat_id: r.sat_id,
            master_id: mr.sat_id,
            dd_pseudorange_m: dd_pr,
            dd_carrier_m: dd_cp,
            covariance_m2: pr_sd_var[i] + pr_sd_var[mi],
            carrier_covariance_m2: cp_sd_var[i] + cp_sd_var[mi],
            sat_pos_m: r.sat_pos_m,
            master_pos_m: mr.sat_pos_m,
        });
    }

    // D·diag(σ²)·Dᵀ with D = [I | −1] reduces to diag(σ_s²) + σ_w²·11ᵀ.
    let build = |sd: &[f64]| {
        DMatrix::from_fn(m, m, |a, b| {
            let shared = sd[mi];
            if a == b {
                sd[others[a]] + shared
            } else if opts.diagonal_dd_cov {
                0.0
            } else {
                shared
            }
        })
    };
    Ok(DdGroup {
        constellation,
        master_id: mr.sat_id,
        pseudorange_cov: build(&pr_sd_var),
        carrier_cov: build(&cp_sd_var),
        observations,
    })
}

/// Double-differenced geometric range
/// `(‖x_r − p^s‖ − ‖p_b − p^s‖) − (‖x_r − p^w‖ − ‖p_b − p^w‖)`.
pub fn dd_range(
    rover_pos: &Vector3<f64>,
    sat_pos: &Vector3<f64>,
    master_pos: &Vector3<f64>,
    base_pos: &Vector3<f64>,
) -> f64 {
    ((rover_pos - sat_pos).norm() - (base_pos - sat_pos).norm())
        - ((rover_pos - master_pos).norm() - (base_pos - master_pos).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdKind {
    Pseudorange,
    Carrier,
}

/// Predicted DD observable in meters; the carrier adds `λ·ΔN` from the state.
pub fn dd_predict(
    state: &ReceiverState,
    sat_id: SatId,
    sat_pos: &Vector3<f64>,
    master_pos: &Vector3<f64>,
    base_pos: &Vector3<f64>,
    kind: DdKind,
) -> Result<f64> {
    for p in [sat_pos, master_pos] {
        if (p - state.pos_m).norm() < 1.0 || (p - base_pos).norm() < 1.0 {
            return Err(Error::DegenerateGeometry("satellite coincides with a receiver"));
        }
    }
    let range = dd_range(&state.pos_m, sat_pos, master_pos, base_pos);
    match kind {
        DdKind::Pseudorange => Ok(range),
        DdKind::Carrier => {
            let n = state
                .dd_ambiguities_cycles
                .get(&sat_id)
                .copied()
                .ok_or(Error::MissingAmbiguity(sat_id))?;
            Ok(range + LAMBDA_L1 * n)
        }
    }
}

/// Gradient of [`dd_range`] with respect to the rover position: `e^w − e^s`.
pub fn dd_range_gradient(
    rover_pos: &Vector3<f64>,
    sat_pos: &Vector3<f64>,
    master_pos: &Vector3<f64>,
) -> Vector3<f64> {
    let es = (sat_pos - rover_pos).normalize();
    let ew = (master_pos - rover_pos).normalize();
    ew - es
}
