//! End-to-end runners for the five positioning methods.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::baselines::ekf::{run_ekf_spp, EkfConfig};
use crate::baselines::rtk_ekf::{ekf_rtk_step, RtkEkfConfig, RtkEkfState};
use crate::baselines::wls::wls_spp;
use crate::doppler::{solve_velocity, DopplerConfig, VelocitySolution};
use crate::error::{Error, Result};
use crate::evaluate::{SolutionRecord, SolutionStatus};
use crate::factor_graph::{build_rtk_graph, build_spp_graph, optimize, FgoConfig, FgoSolution, LmOptions};
use crate::lambda::{fix_solution, DEFAULT_RATIO_THRESHOLD};
use crate::measurement::{form_double_differences, DdEpoch, DdOptions, WeightModel};
use crate::types::Epoch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Wls,
    Ekf,
    Fgo,
    RtkEkf,
    RtkFgo,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Wls, Method::Ekf, Method::Fgo, Method::RtkEkf, Method::RtkFgo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Wls => "wls",
            Method::Ekf => "ekf",
            Method::Fgo => "fgo",
            Method::RtkEkf => "rtk-ekf",
            Method::RtkFgo => "rtk-fgo",
        }
    }

    pub fn needs_base(self) -> bool {
        matches!(self, Method::RtkEkf | Method::RtkFgo)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Pseudorange weighting for WLS, EKF and FGO.
    pub weights: WeightModel,
    pub doppler: DopplerConfig,
    pub ekf: EkfConfig,
    pub fgo: FgoConfig,
    pub lm: LmOptions,
    pub rtk_ekf: RtkEkfConfig,
    pub dd: DdOptions,
    pub ratio_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            weights: WeightModel::pseudorange(),
            doppler: DopplerConfig::default(),
            ekf: EkfConfig::default(),
            fgo: FgoConfig::default(),
            lm: LmOptions::default(),
            rtk_ekf: RtkEkfConfig::default(),
            dd: DdOptions::default(),
            ratio_threshold: DEFAULT_RATIO_THRESHOLD,
        }
    }
}

impl PipelineConfig {
    /// Pushes the shared pseudorange weights and ratio threshold into the
    /// per-method configs.
    pub fn propagate(&mut self) {
        self.ekf.weights = self.weights;
        self.fgo.weights = self.weights;
        self.dd.pseudorange_weights = self.weights;
        self.rtk_ekf.ratio_threshold = self.ratio_threshold;
    }
}

/// RTK output per epoch: the reported record (fixed when validated) and the
/// float position it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RtkRecord {
    pub record: SolutionRecord,
    pub float_pos_m: Vector3<f64>,
    pub ratio: f64,
}

pub fn float_records(rtk: &[RtkRecord]) -> Vec<SolutionRecord> {
    rtk.iter()
        .map(|r| SolutionRecord::new(r.record.t, r.float_pos_m, SolutionStatus::RtkFloat, r.record.n_sats))
        .collect()
}

pub fn run_wls(epochs: &[Epoch], cfg: &PipelineConfig) -> Vec<SolutionRecord> {
    let mut prev = None;
    epochs
        .iter()
        .filter_map(|e| {
            let s = wls_spp(e, &cfg.weights, prev).ok()?;
            prev = Some(s.state.pos_m);
            Some(SolutionRecord::new(e.t, s.state.pos_m, SolutionStatus::Wls, e.observations.len()))
        })
        .collect()
}

/// Doppler velocity per epoch, each evaluated at that epoch's WLS position
/// (or the last one available).
pub fn doppler_velocities(epochs: &[Epoch], cfg: &PipelineConfig) -> Vec<Option<VelocitySolution>> {
    let mut prev: Option<Vector3<f64>> = None;
    epochs
        .iter()
        .map(|e| {
            if let Ok(s) = wls_spp(e, &cfg.weights, prev) {
                prev = Some(s.state.pos_m);
            }
            solve_velocity(e, &prev?, &cfg.doppler).ok()
        })
        .collect()
}

pub fn run_ekf(epochs: &[Epoch], cfg: &PipelineConfig) -> Result<Vec<SolutionRecord>> {
    let vels = doppler_velocities(epochs, cfg);
    run_ekf_spp(epochs, &vels, &cfg.ekf)
}

pub fn run_fgo_solution(epochs: &[Epoch], cfg: &PipelineConfig) -> Result<FgoSolution> {
    let vels = doppler_velocities(epochs, cfg);
    let mut graph = build_spp_graph(epochs, &vels, &cfg.fgo)?;
    optimize(&mut graph, &cfg.lm)
}

pub fn run_fgo(epochs: &[Epoch], cfg: &PipelineConfig) -> Result<Vec<SolutionRecord>> {
    let sol = run_fgo_solution(epochs, cfg)?;
    Ok(sol
        .t
        .iter()
        .zip(&sol.states)
        .zip(epochs)
        .map(|((t, s), e)| SolutionRecord::new(*t, s.pos_m, SolutionStatus::Fgo, e.observations.len()))
        .collect())
}

/// Rover epochs paired with the nearest base epoch, differenced. Epochs with
/// no usable base counterpart are dropped.
pub fn pair_double_differences(
    rover: &[Epoch],
    base: &[Epoch],
    base_pos: &Vector3<f64>,
    opts: &DdOptions,
) -> Vec<(usize, DdEpoch)> {
    rover
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let j = base.partition_point(|b| b.t < r.t);
            let b = [j.checked_sub(1), Some(j)]
                .into_iter()
                .flatten()
                .filter_map(|k| base.get(k))
                .min_by(|a, b| (a.t - r.t).abs().total_cmp(&(b.t - r.t).abs()))?;
            form_double_differences(r, b, base_pos, opts).ok().map(|dd| (i, dd))
        })
        .collect()
}

pub fn run_rtk_ekf(rover: &[Epoch], base: &[Epoch], base_pos: &Vector3<f64>, cfg: &PipelineConfig) -> Result<Vec<RtkRecord>> {
    let dds = pair_double_differences(rover, base, base_pos, &cfg.dd);
    let mut state: Option<RtkEkfState> = None;
    let mut prev_pos: Option<Vector3<f64>> = None;
    let mut out = Vec::with_capacity(dds.len());
    for (i, dd) in dds {
        let e = &rover[i];
        let wls = wls_spp(e, &cfg.weights, prev_pos).ok();
        if let Some(w) = &wls {
            prev_pos = Some(w.state.pos_m);
        }
        let s = match state.take() {
            Some(s) => s,
            None => {
                let Some(w) = &wls else { continue };
                let v = solve_velocity(e, &w.state.pos_m, &cfg.doppler).ok();
                // Start just before this epoch so the first step is a plain update.
                RtkEkfState::initialize(w.state.pos_m, w.position_covariance().trace(), e.t, v.as_ref(), &cfg.rtk_ekf)
            }
        };
        let v = solve_velocity(e, &s.filter.position(), &cfg.doppler).ok();
        let (s, res) = ekf_rtk_step(s, &dd, base_pos, v.as_ref(), &cfg.rtk_ekf)?;
        out.push(RtkRecord {
            record: res.record,
            float_pos_m: res.float_pos_m,
            ratio: res.ratio,
        });
        state = Some(s);
    }
    Ok(out)
}

pub fn run_rtk_fgo(rover: &[Epoch], base: &[Epoch], base_pos: &Vector3<f64>, cfg: &PipelineConfig) -> Result<Vec<RtkRecord>> {
    let dds = pair_double_differences(rover, base, base_pos, &cfg.dd);
    if dds.is_empty() {
        return Err(Error::InsufficientCommonSatellites);
    }
    let epochs: Vec<Epoch> = dds.iter().map(|(i, _)| rover[*i].clone()).collect();
    let vels = doppler_velocities(&epochs, cfg);
    let mut prev = None;
    let init: Vec<Vector3<f64>> = epochs
        .iter()
        .map(|e| {
            let p = wls_spp(e, &cfg.weights, prev).map(|w| w.state.pos_m).ok().or(prev).unwrap_or(*base_pos);
            prev = Some(p);
            p
        })
        .collect();
    let dd: Vec<DdEpoch> = dds.into_iter().map(|(_, d)| d).collect();
    let mut graph = build_rtk_graph(&dd, &vels, *base_pos, &cfg.fgo, Some(&init))?;
    let sol = optimize(&mut graph, &cfg.lm)?;
    let mut out = Vec::with_capacity(dd.len());
    for (k, d) in dd.iter().enumerate() {
        let state = &sol.states[k];
        let cov = &sol.covariances[k];
        let sats = &sol.layouts[k].ambiguities;
        let fix = if cov.nrows() == 3 + sats.len() && !sats.is_empty() {
            Some(fix_solution(state, sats, cov, cfg.ratio_threshold)?)
        } else {
            None
        };
        let (pos, status, ratio) = match &fix {
            Some(f) if f.fixed => (f.state.pos_m, SolutionStatus::RtkFixed, f.ratio),
            Some(f) => (state.pos_m, SolutionStatus::RtkFloat, f.ratio),
            None => (state.pos_m, SolutionStatus::RtkFloat, 0.0),
        };
        out.push(RtkRecord {
            record: SolutionRecord::new(d.t, pos, status, d.n_common),
            float_pos_m: state.pos_m,
            ratio,
        });
    }
    Ok(out)
}

type RtkRunner = fn(&[Epoch], &[Epoch], &Vector3<f64>, &PipelineConfig) -> Result<Vec<RtkRecord>>;

/// Runs one method. RTK methods need `base` (epochs and position).
pub fn run_method(
    method: Method,
    rover: &[Epoch],
    base: Option<(&[Epoch], &Vector3<f64>)>,
    cfg: &PipelineConfig,
) -> Result<Vec<SolutionRecord>> {
    let rtk = |f: RtkRunner| {
        let (b, p) = base.ok_or_else(|| Error::InvalidConfig(format!("{} needs base station data", method.name())))?;
        Ok(f(rover, b, p, cfg)?.into_iter().map(|r| r.record).collect())
    };
    match method {
        Method::Wls => Ok(run_wls(rover, cfg)),
        Method::Ekf => run_ekf(rover, cfg),
        Method::Fgo => run_fgo(rover, cfg),
        Method::RtkEkf => rtk(run_rtk_ekf),
        Method::RtkFgo => rtk(run_rtk_fgo),
    }
}
