//! WGS-84 coordinate conversions, line-of-sight geometry and the range-rate model.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::types::{C_LIGHT, OMEGA_EARTH};

/// WGS-84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

const MAX_GEODETIC_ITER: usize = 10;

/// Geodetic latitude/longitude (rad) and ellipsoidal height (m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geodetic {
    pub lat: f64,
    pub lon: f64,
    pub height: f64,
}

pub fn ecef_to_geodetic(pos: &Vector3<f64>) -> Result<Geodetic> {
    let norm = pos.norm();
    if !(norm > 1.0e6) {
        return Err(Error::NearEarthCenter(norm));
    }
    let r2 = pos.x * pos.x + pos.y * pos.y;
    // Fixed-point iteration on z + N·e²·sin(lat).
    let mut z = pos.z;
    let mut n = WGS84_A;
    for _ in 0..MAX_GEODETIC_ITER {
        let sinp = z / (r2 + z * z).sqrt();
        n = WGS84_A / (1.0 - WGS84_E2 * sinp * sinp).sqrt();
        let next = pos.z + n * WGS84_E2 * sinp;
        let done = (next - z).abs() <= 1e-12 * next.abs().max(1.0);
        z = next;
        if done {
            break;
        }
    }
    let (lat, lon) = if r2 > 1e-12 {
        ((z / r2.sqrt()).atan(), pos.y.atan2(pos.x))
    } else if pos.z > 0.0 {
        (std::f64::consts::FRAC_PI_2, 0.0)
    } else {
        (-std::f64::consts::FRAC_PI_2, 0.0)
    };
    Ok(Geodetic {
        lat,
        lon,
        height: (r2 + z * z).sqrt() - n,
    })
}

pub fn geodetic_to_ecef(g: &Geodetic) -> Vector3<f64> {
    let (sl, cl) = g.lat.sin_cos();
    let (so, co) = g.lon.sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * sl * sl).sqrt();
    Vector3::new(
        (n + g.height) * cl * co,
        (n + g.height) * cl * so,
        (n * (1.0 - WGS84_E2) + g.height) * sl,
    )
}

/// ECEF→ENU rotation at the given geodetic latitude/longitude; rows are E, N, U.
pub fn enu_rotation(lat: f64, lon: f64) -> Matrix3<f64> {
    let (sl, cl) = lat.sin_cos();
    let (so, co) = lon.sin_cos();
    Matrix3::new(
        -so,
        co,
        0.0,
        -sl * co,
        -sl * so,
        cl,
        cl * co,
        cl * so,
        sl,
    )
}

/// Local east-north-up frame anchored at an ECEF origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnuFrame {
    pub origin_ecef_m: Vector3<f64>,
    /// ECEF→ENU direction matrix.
    pub rotation: Matrix3<f64>,
}

impl EnuFrame {
    pub fn new(origin_ecef_m: Vector3<f64>) -> Result<Self> {
        let g = ecef_to_geodetic(&origin_ecef_m)?;
        Ok(Self {
            origin_ecef_m,
            rotation: enu_rotation(g.lat, g.lon),
        })
    }

    pub fn to_enu(&self, ecef: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (ecef - self.origin_ecef_m)
    }

    pub fn to_ecef(&self, enu: &Vector3<f64>) -> Vector3<f64> {
        self.origin_ecef_m + self.rotation.transpose() * enu
    }

    /// Rotates a difference vector (no translation).
    pub fn rotate(&self, ecef_delta: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * ecef_delta
    }

    pub fn up(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }
}

/// Unit vector from the receiver toward the satellite.
pub fn los_unit_vector(sat_pos: &Vector3<f64>, rcv_pos: &Vector3<f64>) -> Result<Vector3<f64>> {
    let d = sat_pos - rcv_pos;
    let r = d.norm();
    if !(r >= 1.0) {
        return Err(Error::DegenerateGeometry("satellite and receiver coincide"));
    }
    Ok(d / r)
}

/// Elevation of the satellite above the ellipsoidal tangent plane at the receiver.
pub fn elevation_angle(sat_pos: &Vector3<f64>, rcv_pos: &Vector3<f64>) -> Result<f64> {
    let los = los_unit_vector(sat_pos, rcv_pos)?;
    let g = ecef_to_geodetic(rcv_pos)
        .map_err(|_| Error::DegenerateGeometry("receiver near earth center"))?;
    let up = enu_rotation(g.lat, g.lon).row(2).transpose();
    Ok(los.dot(&up).clamp(-1.0, 1.0).asin())
}

/// Expected range rate including the earth-rotation correction:
/// `e·(v^s − v_r) + (ω/c)(v^s_y p_x + p^s_y v_x − p^s_x v_y − v^s_x p_y)`.
pub fn expected_range_rate(
    sat_pos: &Vector3<f64>,
    sat_vel: &Vector3<f64>,
    rcv_pos: &Vector3<f64>,
    rcv_vel: &Vector3<f64>,
) -> Result<f64> {
    let e = los_unit_vector(sat_pos, rcv_pos)?;
    let geometric = e.dot(&(sat_vel - rcv_vel));
    let sagnac = OMEGA_EARTH / C_LIGHT
        * (sat_vel.y * rcv_pos.x + sat_pos.y * rcv_vel.x
            - sat_pos.x * rcv_vel.y
            - sat_vel.x * rcv_pos.y);
    Ok(geometric + sagnac)
}
