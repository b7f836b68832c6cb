//! Iterated weighted least-squares single-point positioning.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::doppler::MIN_WEIGHT_ELEVATION;
use crate::error::{Error, Result};
use crate::geometry::elevation_angle;
use crate::measurement::WeightModel;
use crate::types::{Constellation, Epoch, ReceiverState};

const MAX_ITER: usize = 10;
const STEP_TOL_M: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct WlsSolution {
    pub state: ReceiverState,
    /// Covariance over (x, y, z, clock per constellation in `clocks` order).
    pub covariance: DMatrix<f64>,
    pub clocks: Vec<Constellation>,
    pub residuals_m: Vec<f64>,
    pub iterations: usize,
}

impl WlsSolution {
    pub fn position_covariance(&self) -> nalgebra::Matrix3<f64> {
        self.covariance.fixed_view::<3, 3>(0, 0).into_owned()
    }
}

/// Elevation used for weighting; falls back to zenith while the position is
/// still near the earth center.
pub(crate) fn weighting_elevation(sat: &Vector3<f64>, rcv: &Vector3<f64>) -> f64 {
    if rcv.norm() < 1.0e6 {
        return std::f64::consts::FRAC_PI_2;
    }
    elevation_angle(sat, rcv)
        .unwrap_or(std::f64::consts::FRAC_PI_2)
        .max(MIN_WEIGHT_ELEVATION)
}

/// Gauss-Newton WLS on corrected pseudoranges with one clock per constellation.
pub fn wls_spp(epoch: &Epoch, weights: &WeightModel, init: Option<Vector3<f64>>) -> Result<WlsSolution> {
    let clocks = epoch.constellations();
    let n_unknown = 3 + clocks.len();
    let n = epoch.observations.len();
    if n < n_unknown || clocks.is_empty() {
        return Err(Error::InsufficientSatellites {
            needed: n_unknown.max(4),
            available: n,
        });
    }
    let mut x = DVector::zeros(n_unknown);
    if let Some(p) = init {
        x.fixed_rows_mut::<3>(0).copy_from(&p);
    }
    let mut h = DMatrix::zeros(n, n_unknown);
    let mut r = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    for iter in 1..=MAX_ITER {
        let pos = Vector3::new(x[0], x[1], x[2]);
        for (i, o) in epoch.observations.iter().enumerate() {
            let d = o.sat_pos_m - pos;
            let range = d.norm();
            if range < 1.0 {
                return Err(Error::DegenerateGeometry("satellite and receiver coincide"));
            }
            let e = d / range;
            let ci = clocks.iter().position(|c| *c == o.sat_id.constellation).unwrap();
            h.row_mut(i).fill(0.0);
            h[(i, 0)] = -e.x;
            h[(i, 1)] = -e.y;
            h[(i, 2)] = -e.z;
            h[(i, 3 + ci)] = 1.0;
            r[i] = o.corrected_pseudorange() - (range + x[3 + ci]);
            let el = weighting_elevation(&o.sat_pos_m, &pos);
            w[i] = 1.0 / weights.variance(el, o.snr_dbhz)?;
        }
        let ht_w = DMatrix::from_fn(n_unknown, n, |a, b| h[(b, a)] * w[b]);
        let normal = &ht_w * &h;
        let chol = normal.clone().cholesky().ok_or(Error::SingularGeometry(f64::INFINITY))?;
        let dx = chol.solve(&(&ht_w * &r));
        x += &dx;
        if dx.fixed_rows::<3>(0).norm() < STEP_TOL_M {
            let pos = Vector3::new(x[0], x[1], x[2]);
            let mut state = ReceiverState::at(pos);
            for (ci, c) in clocks.iter().enumerate() {
                state.clock_bias_m.insert(*c, x[3 + ci]);
            }
            let residuals_m = (&r - &h * &dx).iter().copied().collect();
            let covariance = chol.inverse();
            let covariance = 0.5 * (&covariance + covariance.transpose());
            return Ok(WlsSolution {
                state,
                covariance,
                clocks,
                residuals_m,
                iterations: iter,
            });
        }
    }
    Err(Error::NoConvergence(MAX_ITER))
}
