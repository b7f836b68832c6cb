//! Deterministic synthetic GNSS scenarios: satellite geometry, receiver
//! trajectory and clocks, code/carrier/Doppler forward models, noise and
//! time-correlated NLOS errors.
//!
//! Every random draw comes from a ChaCha8 stream selected by
//! (receiver, satellite, channel), so adding a satellite or a receiver never
//! perturbs the draws of another.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::doppler::DopplerConfig;
use crate::error::{Error, Result};
use crate::geometry::{elevation_angle, expected_range_rate, geodetic_to_ecef, EnuFrame, Geodetic};
use crate::measurement::WeightModel;
use crate::types::{Constellation, Epoch, SatId, SatObservation, LAMBDA_L1};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Static {
        enu_m: [f64; 3],
    },
    /// Closed polyline through ENU waypoints, driven at constant speed.
    Waypoints {
        points_enu_m: Vec<[f64; 3]>,
        speed_mps: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockProfile {
    pub initial_bias_m: f64,
    pub drift_mps: f64,
    /// Drift random walk (m/s per √s).
    pub random_walk_sigma: f64,
    /// BeiDou clock minus GPS clock (m).
    pub inter_system_bias_m: f64,
}

impl Default for ClockProfile {
    fn default() -> Self {
        Self {
            initial_bias_m: 1500.0,
            drift_mps: 0.8,
            random_walk_sigma: 0.02,
            inter_system_bias_m: 15.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub enabled: bool,
    /// σ of each measurement is the square root of the model variance at the
    /// satellite's elevation and SNR.
    pub pseudorange: WeightModel,
    pub carrier: WeightModel,
    pub doppler: WeightModel,
    pub snr_sigma_db: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            pseudorange: WeightModel::with_sigma0(1.0),
            carrier: WeightModel::with_sigma0(0.003),
            doppler: WeightModel::with_sigma0(0.05),
            snr_sigma_db: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlosConfig {
    pub prob_per_sat_epoch: f64,
    pub bias_range_m: [f64; 2],
    /// Below this elevation the NLOS probability doubles.
    pub elevation_mask_deg: f64,
    /// An NLOS state and its bias persist for this long.
    pub dwell_s: f64,
    /// SNR loss of a reflected-only signal.
    pub snr_drop_db: f64,
    /// Reflected carrier carries the same excess path as the code.
    pub affects_carrier: bool,
}

impl Default for NlosConfig {
    fn default() -> Self {
        Self {
            prob_per_sat_epoch: 0.0,
            bias_range_m: [10.0, 80.0],
            elevation_mask_deg: 30.0,
            dwell_s: 5.0,
            snr_drop_db: 8.0,
            affects_carrier: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub rate_hz: f64,
    pub origin_lat_deg: f64,
    pub origin_lon_deg: f64,
    pub origin_height_m: f64,
    pub trajectory: Trajectory,
    pub n_sats_per_constellation: usize,
    pub constellations: Vec<Constellation>,
    pub sat_shell_radius_m: f64,
    /// Azimuthal drift rate of the satellite shell (rad/s).
    pub sat_angular_rate: f64,
    pub clock: ClockProfile,
    pub noise: NoiseConfig,
    pub nlos: NlosConfig,
    /// Zenith ionospheric delay, mapped by elevation at the scenario origin.
    pub iono_zenith_m: f64,
    pub tropo_zenith_m: f64,
    /// Base station position relative to the origin; `None` for SPP scenarios.
    pub base_station_enu: Option<[f64; 3]>,
    pub with_carrier: bool,
    /// Rover integer ambiguities; drawn from the seed when empty.
    pub true_ambiguities: BTreeMap<SatId, i64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration_s: 200.0,
            rate_hz: 1.0,
            origin_lat_deg: 22.3193,
            origin_lon_deg: 114.1694,
            origin_height_m: 10.0,
            trajectory: Trajectory::Static { enu_m: [0.0; 3] },
            n_sats_per_constellation: 8,
            constellations: vec![Constellation::Gps, Constellation::BeiDou],
            sat_shell_radius_m: 26.6e6,
            sat_angular_rate: 1.5e-4,
            clock: ClockProfile::default(),
            noise: NoiseConfig::default(),
            nlos: NlosConfig::default(),
            iono_zenith_m: 3.0,
            tropo_zenith_m: 2.3,
            base_station_enu: None,
            with_carrier: false,
            true_ambiguities: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Low,
    Mid,
    High,
}

impl std::str::FromStr for Severity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Severity::Low),
            "mid" => Ok(Severity::Mid),
            "high" => Ok(Severity::High),
            _ => Err(Error::InvalidConfig(format!("unknown severity {s}"))),
        }
    }
}

/// Urban driving loop with NLOS reception.
///
/// | severity | NLOS prob | bias (m) |
/// |----------|-----------|----------|
/// | high     | 0.30      | 10–80    |
/// | mid      | 0.15      | 5–40     |
/// | low      | 0.05      | 2–15     |
///
/// All use a 30° elevation mask below which the probability doubles.
pub fn urban_canyon_preset(severity: Severity) -> ScenarioConfig {
    let (prob, lo, hi) = match severity {
        Severity::High => (0.3, 10.0, 80.0),
        Severity::Mid => (0.15, 5.0, 40.0),
        Severity::Low => (0.05, 2.0, 15.0),
    };
    ScenarioConfig {
        trajectory: Trajectory::Waypoints {
            points_enu_m: vec![
                [0.0, 0.0, 0.0],
                [220.0, 0.0, 0.0],
                [220.0, 140.0, 1.0],
                [0.0, 140.0, 1.0],
            ],
            speed_mps: 8.0,
        },
        nlos: NlosConfig {
            prob_per_sat_epoch: prob,
            bias_range_m: [lo, hi],
            elevation_mask_deg: 30.0,
            ..NlosConfig::default()
        },
        ..ScenarioConfig::default()
    }
}

/// Static rover with a base station a few hundred metres away; carrier phase
/// on, NLOS only at the rover.
pub fn rtk_static_preset(nlos_prob: f64) -> ScenarioConfig {
    ScenarioConfig {
        duration_s: 120.0,
        base_station_enu: Some([-260.0, 190.0, -3.0]),
        with_carrier: true,
        nlos: NlosConfig {
            prob_per_sat_epoch: nlos_prob,
            bias_range_m: [5.0, 40.0],
            ..NlosConfig::default()
        },
        ..ScenarioConfig::default()
    }
}

impl ScenarioConfig {
    /// Same scenario with every noise source, clock wander and NLOS removed.
    pub fn noiseless(mut self) -> Self {
        self.noise.enabled = false;
        self.nlos.prob_per_sat_epoch = 0.0;
        self.clock.random_walk_sigma = 0.0;
        self
    }

    pub fn origin_ecef(&self) -> Vector3<f64> {
        geodetic_to_ecef(&Geodetic {
            lat: self.origin_lat_deg.to_radians(),
            lon: self.origin_lon_deg.to_radians(),
            height: self.origin_height_m,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.duration_s > 0.0) || !(self.rate_hz > 0.0) {
            return bad("duration_s and rate_hz must be positive");
        }
        if self.n_sats_per_constellation == 0 || self.constellations.is_empty() {
            return bad("at least one satellite is required");
        }
        if self.n_sats_per_constellation > 60 {
            return bad("at most 60 satellites per constellation");
        }
        if !(self.sat_shell_radius_m > 1.0e7) {
            return bad("sat_shell_radius_m must exceed 1e7 m");
        }
        let p = self.nlos.prob_per_sat_epoch;
        if !(0.0..=1.0).contains(&p) {
            return bad("nlos probability must lie in [0, 1]");
        }
        let [lo, hi] = self.nlos.bias_range_m;
        if !(lo >= 0.0 && hi >= lo) {
            return bad("nlos bias range must satisfy 0 <= min <= max");
        }
        if !(self.nlos.dwell_s > 0.0) {
            return bad("nlos dwell must be positive");
        }
        if let Trajectory::Waypoints { points_enu_m, speed_mps } = &self.trajectory {
            if points_enu_m.len() < 2 || !(*speed_mps >= 0.0) {
                return bad("waypoint trajectory needs two points and a non-negative speed");
            }
        }
        for w in [&self.noise.pseudorange, &self.noise.carrier, &self.noise.doppler] {
            w.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub t: Vec<f64>,
    pub pos_m: Vec<Vector3<f64>>,
    pub vel_mps: Vec<Vector3<f64>>,
    pub clock_bias_m: Vec<BTreeMap<Constellation, f64>>,
    pub clock_drift_mps: Vec<f64>,
    /// Satellites received NLOS at each epoch.
    pub nlos: Vec<BTreeSet<SatId>>,
    pub rover_ambiguities: BTreeMap<SatId, i64>,
    pub base_ambiguities: BTreeMap<SatId, i64>,
    pub base_pos_m: Option<Vector3<f64>>,
    pub enu_origin_m: Vector3<f64>,
}

impl GroundTruth {
    /// Integer DD ambiguity of `sat` against `master`.
    pub fn dd_ambiguity(&self, sat: SatId, master: SatId) -> Option<i64> {
        let r = |s| self.rover_ambiguities.get(&s).copied();
        let b = |s| self.base_ambiguities.get(&s).copied();
        Some((r(sat)? - b(sat)?) - (r(master)? - b(master)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub rover: Vec<Epoch>,
    pub base: Option<Vec<Epoch>>,
    pub truth: GroundTruth,
}

const CH_CODE: u64 = 0;
const CH_CARRIER: u64 = 1;
const CH_DOPPLER: u64 = 2;
const CH_NLOS: u64 = 3;
const CH_SNR: u64 = 4;
const CH_AMBIGUITY: u64 = 5;
const CH_SAT_CLOCK: u64 = 6;
const CH_RCV_CLOCK: u64 = 7;

fn stream(seed: u64, receiver: u64, sat: Option<SatId>, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sat_key = sat.map_or(0, |s| {
        let c = match s.constellation {
            Constellation::Gps => 1,
            Constellation::BeiDou => 2,
        };
        (c << 8) | s.prn as u64
    });
    rng.set_stream((receiver << 32) | (sat_key << 8) | channel);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Satellite shell: fixed elevation slots, azimuth drifting with time.
#[derive(Debug, Clone)]
struct Shell {
    origin: Vector3<f64>,
    frame: EnuFrame,
    radius: f64,
    rate: f64,
    slots: Vec<(SatId, f64, f64)>,
}

const ELEVATION_SLOTS_DEG: [f64; 8] = [15.0, 24.0, 33.0, 42.0, 52.0, 62.0, 73.0, 84.0];

impl Shell {
    fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let origin = cfg.origin_ecef();
        let mut slots = Vec::new();
        for (ci, c) in cfg.constellations.iter().enumerate() {
            let n = cfg.n_sats_per_constellation;
            for i in 0..n {
                let az = std::f64::consts::TAU * i as f64 / n as f64 + 0.7 * ci as f64 + 0.3;
                let el = ELEVATION_SLOTS_DEG[(i * 3 + ci) % ELEVATION_SLOTS_DEG.len()].to_radians();
                slots.push((SatId::new(*c, i as u8 + 1), az, el));
            }
        }
        Ok(Self {
            origin,
            frame: EnuFrame::new(origin)?,
            radius: cfg.sat_shell_radius_m,
            rate: cfg.sat_angular_rate,
            slots,
        })
    }

    fn position(&self, slot: usize, t: f64) -> Vector3<f64> {
        let (_, az0, el) = self.slots[slot];
        let az = az0 + self.rate * t;
        let d_enu = Vector3::new(el.cos() * az.sin(), el.cos() * az.cos(), el.sin());
        let d = self.frame.rotation.transpose() * d_enu;
        let od = self.origin.dot(&d);
        let s = -od + (od * od - self.origin.norm_squared() + self.radius * self.radius).sqrt();
        self.origin + d * s
    }

    fn velocity(&self, slot: usize, t: f64) -> Vector3<f64> {
        let h = 0.5;
        (self.position(slot, t + h) - self.position(slot, t - h)) / (2.0 * h)
    }
}

fn trajectory_state(cfg: &ScenarioConfig, frame: &EnuFrame, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let (enu, vel_enu) = match &cfg.trajectory {
        Trajectory::Static { enu_m } => (Vector3::from(*enu_m), Vector3::zeros()),
        Trajectory::Waypoints { points_enu_m, speed_mps } => {
            let pts: Vec<Vector3<f64>> = points_enu_m.iter().map(|p| Vector3::from(*p)).collect();
            let n = pts.len();
            let seg_len: Vec<f64> = (0..n).map(|i| (pts[(i + 1) % n] - pts[i]).norm()).collect();
            let total: f64 = seg_len.iter().sum();
            if total == 0.0 || *speed_mps == 0.0 {
                (pts[0], Vector3::zeros())
            } else {
                let mut s = (speed_mps * t).rem_euclid(total);
                let mut i = 0;
                while s > seg_len[i] && i + 1 < n {
                    s -= seg_len[i];
                    i += 1;
                }
                let dir = (pts[(i + 1) % n] - pts[i]) / seg_len[i].max(f64::MIN_POSITIVE);
                (pts[i] + dir * s, dir * *speed_mps)
            }
        }
    };
    (frame.to_ecef(&enu), frame.rotation.transpose() * vel_enu)
}

/// NLOS state of one satellite: redrawn at the start of every dwell block.
struct NlosProcess {
    rng: ChaCha8Rng,
    block: Option<i64>,
    active: bool,
    bias: f64,
    phase: f64,
}

impl NlosProcess {
    fn new(mut rng: ChaCha8Rng, dwell: f64) -> Self {
        let phase = rng.random_range(0.0..dwell);
        Self {
            rng,
            block: None,
            active: false,
            bias: 0.0,
            phase,
        }
    }

    fn sample(&mut self, cfg: &NlosConfig, t: f64, elevation: f64) -> Option<f64> {
        let block = ((t + self.phase) / cfg.dwell_s).floor() as i64;
        if self.block != Some(block) {
            self.block = Some(block);
            let mut p = cfg.prob_per_sat_epoch;
            if elevation < cfg.elevation_mask_deg.to_radians() {
                p = (2.0 * p).min(1.0);
            }
            let u: f64 = self.rng.random();
            let [lo, hi] = cfg.bias_range_m;
            let b = if hi > lo { self.rng.random_range(lo..hi) } else { lo };
            self.active = u < p;
            self.bias = b;
        }
        self.active.then_some(self.bias)
    }
}

struct Receiver {
    id: u64,
    clock_rng: ChaCha8Rng,
    bias: f64,
    drift: f64,
    nlos: BTreeMap<SatId, NlosProcess>,
    ambiguities: BTreeMap<SatId, i64>,
    noise_rngs: BTreeMap<(SatId, u64), ChaCha8Rng>,
}

impl Receiver {
    fn new(cfg: &ScenarioConfig, id: u64, sats: &[SatId], bias: f64) -> Self {
        let mut ambiguities = BTreeMap::new();
        let mut nlos = BTreeMap::new();
        let mut noise_rngs = BTreeMap::new();
        for &s in sats {
            let fixed = if id == 0 { cfg.true_ambiguities.get(&s).copied() } else { None };
            let n = fixed.unwrap_or_else(|| stream(cfg.seed, id, Some(s), CH_AMBIGUITY).random_range(-5000..=5000));
            ambiguities.insert(s, n);
            nlos.insert(s, NlosProcess::new(stream(cfg.seed, id, Some(s), CH_NLOS), cfg.nlos.dwell_s));
            for ch in [CH_CODE, CH_CARRIER, CH_DOPPLER, CH_SNR] {
                noise_rngs.insert((s, ch), stream(cfg.seed, id, Some(s), ch));
            }
        }
        Self {
            id,
            clock_rng: stream(cfg.seed, id, None, CH_RCV_CLOCK),
            bias,
            drift: cfg.clock.drift_mps,
            nlos,
            ambiguities,
            noise_rngs,
        }
    }

    fn draw(&mut self, s: SatId, ch: u64, enabled: bool) -> f64 {
        if !enabled {
            return 0.0;
        }
        normal(self.noise_rngs.get_mut(&(s, ch)).unwrap())
    }
}

struct SatState {
    id: SatId,
    pos: Vector3<f64>,
    vel: Vector3<f64>,
    clock: f64,
    drift: f64,
}

#[allow(clippy::too_many_arguments)]
fn observe(
    cfg: &ScenarioConfig,
    rcv: &mut Receiver,
    sats: &[SatState],
    pos: &Vector3<f64>,
    vel: &Vector3<f64>,
    t: f64,
    atmosphere_origin: &Vector3<f64>,
    nlos_enabled: bool,
    nlos_set: &mut BTreeSet<SatId>,
) -> Result<Epoch> {
    let dcfg = DopplerConfig::default();
    let noise = cfg.noise.enabled;
    let mut obs = Vec::with_capacity(sats.len());
    for s in sats {
        let el = elevation_angle(&s.pos, pos)?;
        if el < 5f64.to_radians() {
            continue;
        }
        // One atmosphere for the whole scenario area: delays depend on the
        // satellite's elevation seen from the origin, so they cancel in DDs.
        let el_atm = elevation_angle(&s.pos, atmosphere_origin)?.max(0.05);
        let iono = cfg.iono_zenith_m / (el_atm.sin() * 0.94 + 0.06);
        let tropo = cfg.tropo_zenith_m / el_atm.sin();
        let nlos_bias = if nlos_enabled {
            rcv.nlos.get_mut(&s.id).unwrap().sample(&cfg.nlos, t, el)
        } else {
            None
        };
        let mut snr = 48.0 - 13.0 * (1.0 - el.sin()) + cfg.noise.snr_sigma_db * rcv.draw(s.id, CH_SNR, noise);
        if nlos_bias.is_some() {
            snr -= cfg.nlos.snr_drop_db;
            nlos_set.insert(s.id);
        }
        let clk = rcv.bias
            + if s.id.constellation == Constellation::BeiDou {
                cfg.clock.inter_system_bias_m
            } else {
                0.0
            };
        let range = (s.pos - pos).norm();
        let nb = nlos_bias.unwrap_or(0.0);
        let sd = |w: &WeightModel| -> Result<f64> { Ok(w.variance(el, snr)?.sqrt()) };
        let code_noise = sd(&cfg.noise.pseudorange)? * rcv.draw(s.id, CH_CODE, noise);
        let pr = range + clk - s.clock + iono + tropo + code_noise + nb;
        let carrier = if cfg.with_carrier {
            let n = rcv.ambiguities[&s.id] as f64;
            let cp_noise = sd(&cfg.noise.carrier)? * rcv.draw(s.id, CH_CARRIER, noise);
            let cp_nlos = if cfg.nlos.affects_carrier { nb } else { 0.0 };
            Some((range + clk - s.clock - iono + tropo + cp_noise + cp_nlos) / LAMBDA_L1 + n)
        } else {
            None
        };
        let rr = expected_range_rate(&s.pos, &s.vel, pos, vel)? + rcv.drift - s.drift
            + sd(&cfg.noise.doppler)? * rcv.draw(s.id, CH_DOPPLER, noise);
        obs.push(SatObservation {
            sat_id: s.id,
            pseudorange_m: pr,
            doppler_hz: Some(dcfg.doppler_hz(rr)),
            carrier_phase_cycles: carrier,
            snr_dbhz: snr,
            sat_pos_m: s.pos,
            sat_vel_mps: s.vel,
            sat_clock_bias_m: s.clock,
            sat_clock_drift_mps: s.drift,
            iono_corr_m: iono,
            tropo_corr_m: tropo,
            nlos_flag: nlos_bias.is_some(),
        });
    }
    Ok(Epoch::new(t, obs))
}

/// Generates rover (and optional base) epochs with ground truth.
pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let shell = Shell::new(cfg)?;
    let frame = shell.frame;
    let ids: Vec<SatId> = shell.slots.iter().map(|s| s.0).collect();
    let sat_clock: Vec<(f64, f64)> = ids
        .iter()
        .map(|s| {
            let mut r = stream(cfg.seed, 9, Some(*s), CH_SAT_CLOCK);
            (r.random_range(-3.0e4..3.0e4), r.random_range(-0.05..0.05))
        })
        .collect();
    let mut rover = Receiver::new(cfg, 0, &ids, cfg.clock.initial_bias_m);
    let base_pos = cfg.base_station_enu.map(|b| frame.to_ecef(&Vector3::from(b)));
    let mut base = base_pos.map(|_| Receiver::new(cfg, 1, &ids, -0.4 * cfg.clock.initial_bias_m));

    let n_epochs = (cfg.duration_s * cfg.rate_hz).round() as usize;
    let dt = 1.0 / cfg.rate_hz;
    let mut truth = GroundTruth {
        t: Vec::with_capacity(n_epochs),
        pos_m: Vec::with_capacity(n_epochs),
        vel_mps: Vec::with_capacity(n_epochs),
        clock_bias_m: Vec::with_capacity(n_epochs),
        clock_drift_mps: Vec::with_capacity(n_epochs),
        nlos: Vec::with_capacity(n_epochs),
        rover_ambiguities: if cfg.with_carrier { rover.ambiguities.clone() } else { BTreeMap::new() },
        base_ambiguities: match (&base, cfg.with_carrier) {
            (Some(b), true) => b.ambiguities.clone(),
            _ => BTreeMap::new(),
        },
        base_pos_m: base_pos,
        enu_origin_m: trajectory_state(cfg, &frame, 0.0).0,
    };
    let mut rover_epochs = Vec::with_capacity(n_epochs);
    let mut base_epochs = base.as_ref().map(|_| Vec::with_capacity(n_epochs));
    for k in 0..n_epochs {
        let t = k as f64 * dt;
        let sats: Vec<SatState> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| SatState {
                id: *id,
                pos: shell.position(i, t),
                vel: shell.velocity(i, t),
                clock: sat_clock[i].0 + sat_clock[i].1 * t,
                drift: sat_clock[i].1,
            })
            .collect();
        let (pos, vel) = trajectory_state(cfg, &frame, t);
        let mut nlos = BTreeSet::new();
        rover_epochs.push(observe(cfg, &mut rover, &sats, &pos, &vel, t, &shell.origin, true, &mut nlos)?);
        if let (Some(b), Some(bp), Some(out)) = (base.as_mut(), base_pos, base_epochs.as_mut()) {
            let mut none = BTreeSet::new();
            out.push(observe(cfg, b, &sats, &bp, &Vector3::zeros(), t, &shell.origin, false, &mut none)?);
        }
        let mut clocks = BTreeMap::new();
        for c in &cfg.constellations {
            let isb = if *c == Constellation::BeiDou { cfg.clock.inter_system_bias_m } else { 0.0 };
            clocks.insert(*c, rover.bias + isb);
        }
        truth.t.push(t);
        truth.pos_m.push(pos);
        truth.vel_mps.push(vel);
        truth.clock_bias_m.push(clocks);
        truth.clock_drift_mps.push(rover.drift);
        truth.nlos.push(nlos);
        for r in std::iter::once(&mut rover).chain(base.as_mut()) {
            r.bias += r.drift * dt;
            let w = if cfg.noise.enabled { cfg.clock.random_walk_sigma * dt.sqrt() * normal(&mut r.clock_rng) } else { 0.0 };
            r.drift += w;
            debug_assert!(r.id <= 1);
        }
    }
    Ok(Scenario {
        rover: rover_epochs,
        base: base_epochs,
        truth,
    })
}
