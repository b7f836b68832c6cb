//! Shared domain types, physical constants and unit conventions.
//!
//! Units: positions and ranges in meters, velocities in m/s, clock biases in
//! meters (c·δ), clock drifts in m/s, carrier phase in cycles, Doppler in Hz.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Speed of light in vacuum (m/s).
pub const C_LIGHT: f64 = 299_792_458.0;
/// WGS-84 earth rotation rate (rad/s).
pub const OMEGA_EARTH: f64 = 7.292_115_146_7e-5;
/// GPS L1 carrier frequency (Hz).
pub const FREQ_L1: f64 = 1_575.42e6;
/// GPS L1 carrier wavelength (m).
pub const LAMBDA_L1: f64 = C_LIGHT / FREQ_L1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Constellation {
    Gps,
    BeiDou,
}

impl Constellation {
    pub fn tag(self) -> char {
        match self {
            Constellation::Gps => 'G',
            Constellation::BeiDou => 'C',
        }
    }

    pub fn from_tag(c: char) -> Option<Self> {
        match c {
            'G' => Some(Constellation::Gps),
            'C' => Some(Constellation::BeiDou),
            _ => None,
        }
    }
}

/// Satellite identifier: constellation plus PRN. Orders by constellation first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SatId {
    pub constellation: Constellation,
    pub prn: u8,
}

impl SatId {
    pub const fn new(constellation: Constellation, prn: u8) -> Self {
        Self { constellation, prn }
    }

    pub const fn gps(prn: u8) -> Self {
        Self::new(Constellation::Gps, prn)
    }

    pub const fn beidou(prn: u8) -> Self {
        Self::new(Constellation::BeiDou, prn)
    }
}

impl fmt::Display for SatId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:02}", self.constellation.tag(), self.prn)
    }
}

impl FromStr for SatId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let mut chars = s.chars();
        let tag = chars.next().ok_or_else(|| "empty satellite id".to_string())?;
        let constellation = Constellation::from_tag(tag)
            .ok_or_else(|| format!("unknown constellation tag '{tag}'"))?;
        let prn = chars
            .as_str()
            .parse::<u8>()
            .map_err(|e| format!("bad PRN in '{s}': {e}"))?;
        Ok(SatId::new(constellation, prn))
    }
}

impl Serialize for SatId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SatId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One satellite's measurements and broadcast state at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatObservation {
    pub sat_id: SatId,
    pub pseudorange_m: f64,
    #[serde(default)]
    pub doppler_hz: Option<f64>,
    #[serde(default)]
    pub carrier_phase_cycles: Option<f64>,
    pub snr_dbhz: f64,
    pub sat_pos_m: Vector3<f64>,
    pub sat_vel_mps: Vector3<f64>,
    pub sat_clock_bias_m: f64,
    pub sat_clock_drift_mps: f64,
    #[serde(default)]
    pub iono_corr_m: f64,
    #[serde(default)]
    pub tropo_corr_m: f64,
    /// Simulator truth label; always false for real data.
    #[serde(default)]
    pub nlos_flag: bool,
}

impl SatObservation {
    /// Pseudorange with satellite clock and atmosphere removed, ready to be
    /// compared against `‖p^s − p_r‖ + δ_r`.
    pub fn corrected_pseudorange(&self) -> f64 {
        self.pseudorange_m + self.sat_clock_bias_m - self.iono_corr_m - self.tropo_corr_m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    /// Time of week (s).
    pub t: f64,
    pub observations: Vec<SatObservation>,
}

impl Epoch {
    pub fn new(t: f64, observations: Vec<SatObservation>) -> Self {
        Self { t, observations }
    }

    /// Constellations present in this epoch, in sorted order.
    pub fn constellations(&self) -> Vec<Constellation> {
        let mut out: Vec<Constellation> =
            self.observations.iter().map(|o| o.sat_id.constellation).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn get(&self, id: SatId) -> Option<&SatObservation> {
        self.observations.iter().find(|o| o.sat_id == id)
    }
}

/// Per-epoch receiver unknowns.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReceiverState {
    pub pos_m: Vector3<f64>,
    pub vel_mps: Vector3<f64>,
    pub clock_bias_m: BTreeMap<Constellation, f64>,
    pub clock_drift_mps: f64,
    /// Double-difference ambiguities keyed by the non-master satellite (cycles).
    pub dd_ambiguities_cycles: BTreeMap<SatId, f64>,
}

impl ReceiverState {
    pub fn at(pos_m: Vector3<f64>) -> Self {
        Self {
            pos_m,
            ..Default::default()
        }
    }

    pub fn clock_for(&self, c: Constellation) -> f64 {
        self.clock_bias_m.get(&c).copied().unwrap_or(0.0)
    }
}

/// Range gates applied by [`validate_epoch_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationLimits {
    pub pseudorange_min_m: f64,
    pub pseudorange_max_m: f64,
    pub snr_min_dbhz: f64,
    pub snr_max_dbhz: f64,
}

impl Default for ValidationLimits {
    fn default() -> Self {
        Self {
            pseudorange_min_m: 1.0e7,
            pseudorange_max_m: 5.0e7,
            snr_min_dbhz: 0.0,
            snr_max_dbhz: 60.0,
        }
    }
}

pub fn validate_epoch(epoch: Epoch) -> Result<Epoch> {
    validate_epoch_with(epoch, &ValidationLimits::default())
}

/// Sorts observations by satellite id and rejects duplicates and out-of-range fields.
pub fn validate_epoch_with(mut epoch: Epoch, limits: &ValidationLimits) -> Result<Epoch> {
    if !epoch.t.is_finite() {
        return Err(Error::FieldOutOfRange {
            field: "t",
            value: epoch.t,
        });
    }
    for obs in &epoch.observations {
        let pr = obs.pseudorange_m;
        if !(pr > limits.pseudorange_min_m && pr < limits.pseudorange_max_m) {
            return Err(Error::FieldOutOfRange {
                field: "pseudorange_m",
                value: pr,
            });
        }
        let snr = obs.snr_dbhz;
        if !(limits.snr_min_dbhz..=limits.snr_max_dbhz).contains(&snr) {
            return Err(Error::FieldOutOfRange {
                field: "snr_dbhz",
                value: snr,
            });
        }
        let finite = [
            ("doppler_hz", obs.doppler_hz.unwrap_or(0.0)),
            ("carrier_phase_cycles", obs.carrier_phase_cycles.unwrap_or(0.0)),
            ("sat_clock_bias_m", obs.sat_clock_bias_m),
            ("sat_clock_drift_mps", obs.sat_clock_drift_mps),
            ("iono_corr_m", obs.iono_corr_m),
            ("tropo_corr_m", obs.tropo_corr_m),
        ];
        for (field, value) in finite {
            if !value.is_finite() {
                return Err(Error::FieldOutOfRange { field, value });
            }
        }
        for v in obs.sat_pos_m.iter().chain(obs.sat_vel_mps.iter()) {
            if !v.is_finite() {
                return Err(Error::FieldOutOfRange {
                    field: "sat_state",
                    value: *v,
                });
            }
        }
    }
    epoch.observations.sort_by_key(|o| o.sat_id);
    for pair in epoch.observations.windows(2) {
        if pair[0].sat_id == pair[1].sat_id {
            return Err(Error::DuplicateSatellite(pair[0].sat_id));
        }
    }
    Ok(epoch)
}
