//! Receiver velocity and clock drift from Doppler measurements by weighted least squares.

use nalgebra::{DMatrix, DVector, Matrix4, SymmetricEigen, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{elevation_angle, expected_range_rate, los_unit_vector};
use crate::measurement::WeightModel;
use crate::types::{Epoch, SatId, C_LIGHT, LAMBDA_L1, OMEGA_EARTH};

/// Elevation floor used only for weighting (rad).
pub(crate) const MIN_WEIGHT_ELEVATION: f64 = 0.5 * std::f64::consts::PI / 180.0;

const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DopplerConfig {
    /// `range_rate = doppler_sign · λ · doppler_hz`. The receiver convention
    /// (positive Doppler for a closing range) is `-1`.
    pub doppler_sign: f64,
    pub wavelength_m: f64,
    pub weights: WeightModel,
}

impl Default for DopplerConfig {
    fn default() -> Self {
        Self {
            doppler_sign: -1.0,
            wavelength_m: LAMBDA_L1,
            weights: WeightModel::doppler(),
        }
    }
}

impl DopplerConfig {
    pub fn range_rate(&self, doppler_hz: f64) -> f64 {
        self.doppler_sign * self.wavelength_m * doppler_hz
    }

    /// Inverse of [`DopplerConfig::range_rate`].
    pub fn doppler_hz(&self, range_rate_mps: f64) -> f64 {
        range_rate_mps / (self.doppler_sign * self.wavelength_m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySolution {
    pub t: f64,
    pub vel_mps: Vector3<f64>,
    pub clock_drift_mps: f64,
    /// Covariance of (v_x, v_y, v_z, clock drift).
    pub covariance: Matrix4<f64>,
    pub residuals_mps: Vec<(SatId, f64)>,
}

impl VelocitySolution {
    pub fn velocity_covariance(&self) -> nalgebra::Matrix3<f64> {
        self.covariance.fixed_view::<3, 3>(0, 0).into_owned()
    }
}

pub fn range_rate_measurements(epoch: &Epoch, cfg: &DopplerConfig) -> Result<Vec<(SatId, f64)>> {
    epoch
        .observations
        .iter()
        .map(|o| {
            o.doppler_hz
                .map(|d| (o.sat_id, cfg.range_rate(d)))
                .ok_or(Error::MissingDoppler(o.sat_id))
        })
        .collect()
}

/// Solves for receiver velocity and clock drift at a fixed receiver position.
/// Observations without Doppler are skipped.
pub fn solve_velocity(
    epoch: &Epoch,
    rcv_pos: &Vector3<f64>,
    cfg: &DopplerConfig,
) -> Result<VelocitySolution> {
    let obs: Vec<_> = epoch
        .observations
        .iter()
        .filter(|o| o.doppler_hz.is_some())
        .collect();
    if obs.len() < 4 {
        return Err(Error::InsufficientSatellites {
            needed: 4,
            available: obs.len(),
        });
    }
    let n = obs.len();
    let mut h = DMatrix::zeros(n, 4);
    let mut y = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    let zero = Vector3::zeros();
    for (i, o) in obs.iter().enumerate() {
        let e = los_unit_vector(&o.sat_pos_m, rcv_pos)?;
        // The model is affine in v_r: rr(v_r) = rr(0) + g·v_r.
        let k = OMEGA_EARTH / C_LIGHT;
        let g = -e + Vector3::new(k * o.sat_pos_m.y, -k * o.sat_pos_m.x, 0.0);
        let rr0 = expected_range_rate(&o.sat_pos_m, &o.sat_vel_mps, rcv_pos, &zero)?;
        h.view_mut((i, 0), (1, 3)).copy_from(&g.transpose());
        h[(i, 3)] = 1.0;
        y[i] = cfg.range_rate(o.doppler_hz.unwrap()) - rr0 + o.sat_clock_drift_mps;
        let el = elevation_angle(&o.sat_pos_m, rcv_pos)
            .unwrap_or(std::f64::consts::FRAC_PI_2)
            .max(MIN_WEIGHT_ELEVATION);
        w[i] = 1.0 / cfg.weights.variance(el, o.snr_dbhz)?;
    }
    let hw = DMatrix::from_fn(4, n, |r, c| h[(c, r)] * w[c]);
    let normal = &hw * &h;
    let normal = Matrix4::from_fn(|r, c| normal[(r, c)]);
    let eig = SymmetricEigen::new(normal);
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::SingularGeometry(if lo > 0.0 { hi / lo } else { f64::INFINITY }));
    }
    let covariance = normal
        .try_inverse()
        .ok_or(Error::SingularGeometry(f64::INFINITY))?;
    let covariance = 0.5 * (covariance + covariance.transpose());
    let rhs = &hw * &y;
    let x: Vector4<f64> = covariance * Vector4::new(rhs[0], rhs[1], rhs[2], rhs[3]);
    let fitted = &h * DVector::from_column_slice(x.as_slice());
    let residuals_mps = obs
        .iter()
        .enumerate()
        .map(|(i, o)| (o.sat_id, y[i] - fitted[i]))
        .collect();
    Ok(VelocitySolution {
        t: epoch.t,
        vel_mps: x.fixed_rows::<3>(0).into_owned(),
        clock_drift_mps: x[3],
        covariance,
        residuals_mps,
    })
}
