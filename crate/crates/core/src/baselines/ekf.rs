//! Extended Kalman filter SPP: constant-velocity kinematics, per-constellation
//! clock biases driven by a shared drift, pseudorange and Doppler-velocity
//! updates.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::wls::{weighting_elevation, wls_spp};
use crate::doppler::VelocitySolution;
use crate::error::{Error, Result};
use crate::evaluate::{SolutionRecord, SolutionStatus};
use crate::geometry::{ecef_to_geodetic, enu_rotation};
use crate::measurement::WeightModel;
use crate::types::{Constellation, Epoch, ReceiverState};

/// χ² 0.999 quantile, one degree of freedom.
pub const CHI2_999_1DOF: f64 = 10.828;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfConfig {
    /// White-acceleration spectral density, horizontal (m²/s³).
    pub q_acc_horizontal: f64,
    pub q_acc_vertical: f64,
    /// Clock-drift random-walk spectral density (m²/s³).
    pub q_clk: f64,
    pub weights: WeightModel,
    /// Innovation gate; a measurement whose normalized innovation exceeds it
    /// has its variance inflated to sit on the gate.
    pub gate: Option<f64>,
    /// Prior variance of velocity and drift when no Doppler solution is available.
    pub init_rate_var: f64,
    /// Variance of a clock state added for a newly seen constellation.
    pub init_clock_var: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            q_acc_horizontal: 1.0,
            q_acc_vertical: 0.1,
            q_clk: 0.1,
            weights: WeightModel::pseudorange(),
            gate: None,
            init_rate_var: 100.0,
            init_clock_var: 1.0e6,
        }
    }
}

/// Filter state. Layout: position (3), velocity (3), one clock bias per entry
/// of `clocks`, clock drift, then any extra states appended by RTK.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EkfState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub t_last: Option<f64>,
    pub clocks: Vec<Constellation>,
}

pub(crate) const POS: usize = 0;
pub(crate) const VEL: usize = 3;
const CLK: usize = 6;

impl EkfState {
    pub fn is_initialized(&self) -> bool {
        self.t_last.is_some()
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn position(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(POS).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(VEL).into_owned()
    }

    pub fn position_covariance(&self) -> Matrix3<f64> {
        self.p.fixed_view::<3, 3>(POS, POS).into_owned()
    }

    pub(crate) fn clock_index(&self, c: Constellation) -> Option<usize> {
        self.clocks.iter().position(|k| *k == c).map(|i| CLK + i)
    }

    pub(crate) fn drift_index(&self) -> usize {
        CLK + self.clocks.len()
    }

    /// Bootstraps position and clocks from WLS and rates from Doppler.
    pub fn initialize(epoch: &Epoch, vel: Option<&VelocitySolution>, cfg: &EkfConfig) -> Result<Self> {
        let w = wls_spp(epoch, &cfg.weights, None)?;
        let nc = w.clocks.len();
        let n = 7 + nc;
        let mut x = DVector::zeros(n);
        let mut p = DMatrix::zeros(n, n);
        x.fixed_rows_mut::<3>(POS).copy_from(&w.state.pos_m);
        for i in 0..nc {
            x[CLK + i] = w.state.clock_for(w.clocks[i]);
        }
        let idx: Vec<usize> = (0..3).chain((0..nc).map(|i| CLK + i)).collect();
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                p[(ia, ib)] = w.covariance[(a, b)];
            }
        }
        let drift = CLK + nc;
        match vel {
            Some(v) => {
                x.fixed_rows_mut::<3>(VEL).copy_from(&v.vel_mps);
                x[drift] = v.clock_drift_mps;
                for a in 0..4 {
                    for b in 0..4 {
                        let ia = if a < 3 { VEL + a } else { drift };
                        let ib = if b < 3 { VEL + b } else { drift };
                        p[(ia, ib)] = v.covariance[(a, b)];
                    }
                }
            }
            None => {
                for i in (VEL..VEL + 3).chain([drift]) {
                    p[(i, i)] = cfg.init_rate_var;
                }
            }
        }
        Ok(Self {
            x,
            p,
            t_last: Some(epoch.t),
            clocks: w.clocks,
        })
    }

    /// Inserts a state at `at` with zero cross-covariance.
    pub(crate) fn insert_state(&mut self, at: usize, value: f64, var: f64) {
        let n = self.dim();
        self.x = self.x.clone().insert_row(at, value);
        let mut p = DMatrix::zeros(n + 1, n + 1);
        for i in 0..n + 1 {
            for j in 0..n + 1 {
                if i == at || j == at {
                    continue;
                }
                let si = if i > at { i - 1 } else { i };
                let sj = if j > at { j - 1 } else { j };
                p[(i, j)] = self.p[(si, sj)];
            }
        }
        p[(at, at)] = var;
        self.p = p;
    }

    pub(crate) fn remove_state(&mut self, at: usize) {
        self.x = self.x.clone().remove_row(at);
        self.p = self.p.clone().remove_row(at).remove_column(at);
    }

    fn add_clock(&mut self, c: Constellation, value: f64, var: f64) {
        let at = self.drift_index();
        self.clocks.push(c);
        self.insert_state(at, value, var);
    }

    pub(crate) fn symmetrize(&mut self) {
        self.p = 0.5 * (&self.p + self.p.transpose());
    }

    pub fn receiver_state(&self) -> ReceiverState {
        let mut s = ReceiverState::at(self.position());
        s.vel_mps = self.velocity();
        for (i, c) in self.clocks.iter().enumerate() {
            s.clock_bias_m.insert(*c, self.x[CLK + i]);
        }
        s.clock_drift_mps = self.x[self.drift_index()];
        s
    }
}

/// Constant-velocity / clock-drift propagation over `dt`. Extra states beyond
/// the drift are held constant with `extra_q` variance growth per second.
pub(crate) fn predict(state: &mut EkfState, dt: f64, cfg: &EkfConfig, extra_q: f64) -> Result<()> {
    let n = state.dim();
    let drift = state.drift_index();
    let mut f = DMatrix::identity(n, n);
    for i in 0..3 {
        f[(POS + i, VEL + i)] = dt;
    }
    for k in 0..state.clocks.len() {
        f[(CLK + k, drift)] = dt;
    }
    let mut q = DMatrix::zeros(n, n);
    let g = ecef_to_geodetic(&state.position())?;
    let r = enu_rotation(g.lat, g.lon);
    let q_enu = Matrix3::from_diagonal(&Vector3::new(cfg.q_acc_horizontal, cfg.q_acc_horizontal, cfg.q_acc_vertical));
    let q_ecef = r.transpose() * q_enu * r;
    let (d3, d2) = (dt.powi(3) / 3.0, dt.powi(2) / 2.0);
    for i in 0..3 {
        for j in 0..3 {
            q[(POS + i, POS + j)] = q_ecef[(i, j)] * d3;
            q[(POS + i, VEL + j)] = q_ecef[(i, j)] * d2;
            q[(VEL + i, POS + j)] = q_ecef[(i, j)] * d2;
            q[(VEL + i, VEL + j)] = q_ecef[(i, j)] * dt;
        }
    }
    // Every bias integrates the same drift, so their noise is fully shared.
    let clk: Vec<usize> = (0..state.clocks.len()).map(|k| CLK + k).collect();
    for &a in &clk {
        for &b in &clk {
            q[(a, b)] = cfg.q_clk * d3;
        }
        q[(a, drift)] = cfg.q_clk * d2;
        q[(drift, a)] = cfg.q_clk * d2;
    }
    q[(drift, drift)] = cfg.q_clk * dt;
    for i in drift + 1..n {
        q[(i, i)] = extra_q * dt;
    }
    state.x = &f * &state.x;
    state.p = &f * &state.p * f.transpose() + q;
    state.symmetrize();
    Ok(())
}

/// Sequential measurement updates around one linearization point. The state
/// stays at `x̄` while corrections accumulate in `dx`, so every update sees the
/// same Jacobians and the result does not depend on update order.
pub(crate) struct Update {
    pub dx: DVector<f64>,
    pub gate: Option<f64>,
}

impl Update {
    pub(crate) fn new(state: &EkfState, gate: Option<f64>) -> Self {
        Self {
            dx: DVector::zeros(state.dim()),
            gate,
        }
    }

    /// Scalar row with residual `z − h(x̄)`, Joseph form. Returns the normalized
    /// innovation squared before gating.
    pub(crate) fn scalar(&mut self, p: &mut DMatrix<f64>, h: &DVector<f64>, residual: f64, var: f64) -> f64 {
        let innovation = residual - h.dot(&self.dx);
        let ph = &*p * h;
        let s0 = h.dot(&ph);
        let nis = innovation * innovation / (s0 + var);
        let var = match self.gate {
            Some(g) if nis > g => var * nis / g + s0 * (nis / g - 1.0),
            _ => var,
        };
        let k = ph / (s0 + var);
        self.dx += &k * innovation;
        let n = p.nrows();
        let a = DMatrix::identity(n, n) - &k * h.transpose();
        *p = &a * &*p * a.transpose() + &k * k.transpose() * var;
        nis
    }

    /// Rows with a full covariance, whitened and applied one at a time.
    pub(crate) fn whitened(
        &mut self,
        p: &mut DMatrix<f64>,
        h: &DMatrix<f64>,
        residual: &DVector<f64>,
        cov: &DMatrix<f64>,
    ) -> Result<()> {
        let l = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite)?.l();
        let li = l
            .solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows()))
            .ok_or(Error::NotPositiveDefinite)?;
        let hw = &li * h;
        let rw = &li * residual;
        for i in 0..hw.nrows() {
            self.scalar(p, &hw.row(i).transpose(), rw[i], 1.0);
        }
        Ok(())
    }

    pub(crate) fn apply(self, state: &mut EkfState) {
        state.x += self.dx;
        state.symmetrize();
    }
}

/// Velocity measurement update with the Doppler LS velocity covariance.
pub(crate) fn velocity_update(state: &mut EkfState, up: &mut Update, v: &VelocitySolution) -> Result<()> {
    let n = state.dim();
    let mut h = DMatrix::zeros(3, n);
    for i in 0..3 {
        h[(i, VEL + i)] = 1.0;
    }
    let residual = DVector::from_iterator(3, (v.vel_mps - state.velocity()).iter().copied());
    let cov = DMatrix::from_iterator(3, 3, v.velocity_covariance().iter().copied());
    up.whitened(&mut state.p, &h, &residual, &cov)
}

pub(crate) fn check_time(state: &EkfState, t: f64) -> Result<f64> {
    let t_last = state.t_last.ok_or(Error::NotInitialized)?;
    if t < t_last {
        return Err(Error::TimeReversal { t, t_last });
    }
    Ok(t - t_last)
}

fn ensure_clocks(state: &mut EkfState, epoch: &Epoch, cfg: &EkfConfig) {
    for c in epoch.constellations() {
        if state.clock_index(c).is_none() {
            // Seed a new constellation's clock from the existing one.
            let seed = state.clocks.first().map_or(0.0, |k| state.x[state.clock_index(*k).unwrap()]);
            state.add_clock(c, seed, cfg.init_clock_var);
        }
    }
}

fn pseudorange_updates(state: &mut EkfState, up: &mut Update, epoch: &Epoch, cfg: &EkfConfig) -> Result<usize> {
    let pos = state.position();
    let n = state.dim();
    for o in &epoch.observations {
        let d = o.sat_pos_m - pos;
        let range = d.norm();
        if range < 1.0 {
            return Err(Error::DegenerateGeometry("satellite and receiver coincide"));
        }
        let ci = state.clock_index(o.sat_id.constellation).unwrap();
        let mut h = DVector::zeros(n);
        for i in 0..3 {
            h[POS + i] = -d[i] / range;
        }
        h[ci] = 1.0;
        let residual = o.corrected_pseudorange() - (range + state.x[ci]);
        let var = cfg.weights.variance(weighting_elevation(&o.sat_pos_m, &pos), o.snr_dbhz)?;
        up.scalar(&mut state.p, &h, residual, var);
    }
    Ok(epoch.observations.len())
}

/// One predict/update cycle, linearized once at the predicted state. An epoch
/// without observations is predict-only.
pub fn ekf_spp_step(
    mut state: EkfState,
    epoch: &Epoch,
    vel: Option<&VelocitySolution>,
    cfg: &EkfConfig,
) -> Result<(EkfState, SolutionRecord)> {
    let dt = check_time(&state, epoch.t)?;
    predict(&mut state, dt, cfg, 0.0)?;
    ensure_clocks(&mut state, epoch, cfg);
    let mut up = Update::new(&state, cfg.gate);
    let used = pseudorange_updates(&mut state, &mut up, epoch, cfg)?;
    if let Some(v) = vel {
        velocity_update(&mut state, &mut up, v)?;
    }
    up.apply(&mut state);
    state.t_last = Some(epoch.t);
    let rec = SolutionRecord::new(epoch.t, state.position(), SolutionStatus::Ekf, used);
    Ok((state, rec))
}

/// Runs the filter over a sequence, bootstrapping from the first epoch where
/// WLS succeeds. Epochs before that produce no record.
pub fn run_ekf_spp(
    epochs: &[Epoch],
    velocities: &[Option<VelocitySolution>],
    cfg: &EkfConfig,
) -> Result<Vec<SolutionRecord>> {
    if velocities.len() != epochs.len() {
        return Err(Error::InvalidConfig("one velocity slot per epoch is required".into()));
    }
    let mut state: Option<EkfState> = None;
    let mut out = Vec::with_capacity(epochs.len());
    for (e, v) in epochs.iter().zip(velocities) {
        match state.take() {
            None => {
                if let Ok(s) = EkfState::initialize(e, v.as_ref(), cfg) {
                    out.push(SolutionRecord::new(e.t, s.position(), SolutionStatus::Ekf, e.observations.len()));
                    state = Some(s);
                }
            }
            Some(s) => {
                let (s, rec) = ekf_spp_step(s, e, v.as_ref(), cfg)?;
                out.push(rec);
                state = Some(s);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::wls::tests::{synthetic_epoch, truth_pos};
    use crate::doppler::{solve_velocity, DopplerConfig};
    use crate::types::SatId;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids() -> Vec<SatId> {
        (1..=6).map(SatId::gps).chain((1..=5).map(SatId::beidou)).collect()
    }

    fn epoch(ids: &[SatId]) -> Epoch {
        synthetic_epoch(ids, &[(Constellation::Gps, 500.0), (Constellation::BeiDou, 520.0)])
    }

    fn static_run(n: usize, cfg: &EkfConfig, bootstrap_bias: f64) -> (EkfState, Vec<f64>) {
        let base = epoch(&ids());
        let mut e0 = base.clone();
        for (i, o) in e0.observations.iter_mut().enumerate() {
            o.pseudorange_m += bootstrap_bias * [1.0, -0.7, 0.5, -1.3, 0.8][i % 5];
        }
        let mut s = EkfState::initialize(&e0, None, cfg).unwrap();
        let mut traces = vec![s.position_covariance().trace()];
        for k in 1..n {
            let mut e = base.clone();
            e.t = k as f64;
            let v = solve_velocity(&e, &truth_pos(), &DopplerConfig::default()).ok();
            s = ekf_spp_step(s, &e, v.as_ref(), cfg).unwrap().0;
            traces.push(s.position_covariance().trace());
        }
        (s, traces)
    }

    #[test]
    fn static_zero_noise_converges() {
        let (s, traces) = static_run(50, &EkfConfig::default(), 0.0);
        assert!((s.position() - truth_pos()).norm() < 1e-3);
        for w in traces[..=10].windows(2) {
            assert!(w[1] < w[0], "{traces:?}");
        }
    }

    #[test]
    fn perturbed_bootstrap_contracts() {
        let (s0, _) = static_run(1, &EkfConfig::default(), 3.0);
        let (s, _) = static_run(50, &EkfConfig::default(), 3.0);
        let e0 = (s0.position() - truth_pos()).norm();
        let e = (s.position() - truth_pos()).norm();
        assert!(e0 > 1.0 && e < 0.1 * e0, "{e0} {e}");
    }

    #[test]
    fn simulator_static_zero_noise() {
        use crate::simulator::{generate, rtk_static_preset, ScenarioConfig};
        let cfg = ScenarioConfig {
            duration_s: 50.0,
            base_station_enu: None,
            ..rtk_static_preset(0.0)
        }
        .noiseless();
        let sc = generate(&cfg).unwrap();
        let vels: Vec<_> = sc
            .rover
            .iter()
            .zip(&sc.truth.pos_m)
            .map(|(e, p)| solve_velocity(e, p, &DopplerConfig::default()).ok())
            .collect();
        let recs = run_ekf_spp(&sc.rover, &vels, &EkfConfig::default()).unwrap();
        for (r, p) in recs.iter().zip(&sc.truth.pos_m).skip(10) {
            assert!((r.pos_m - p).norm() < 1e-3);
        }
    }

    #[test]
    fn predict_only_grows_covariance() {
        let cfg = EkfConfig::default();
        let e = epoch(&ids());
        let s = EkfState::initialize(&e, None, &cfg).unwrap();
        let tr0 = s.p.trace();
        let (s, rec) = ekf_spp_step(s, &Epoch::new(1.0, vec![]), None, &cfg).unwrap();
        assert!(s.p.trace() > tr0);
        assert_eq!(rec.n_sats, 0);
    }

    #[test]
    fn errors() {
        let cfg = EkfConfig::default();
        let e = epoch(&ids());
        assert!(matches!(ekf_spp_step(EkfState::default(), &e, None, &cfg), Err(Error::NotInitialized)));
        let mut later = e.clone();
        later.t = 10.0;
        let s = EkfState::initialize(&later, None, &cfg).unwrap();
        assert!(matches!(ekf_spp_step(s, &e, None, &cfg), Err(Error::TimeReversal { .. })));
    }

    #[test]
    fn static_limit_matches_wls() {
        // Identical noisy measurements every epoch, no process noise: the filter
        // is recursive least squares on repeated data and converges to WLS.
        let cfg = EkfConfig {
            q_acc_horizontal: 0.0,
            q_acc_vertical: 0.0,
            q_clk: 0.0,
            ..EkfConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut base = epoch(&ids());
        for o in &mut base.observations {
            o.pseudorange_m += rng.random_range(-5.0..5.0);
        }
        let wls = wls_spp(&base, &cfg.weights, None).unwrap();
        let zero_vel = VelocitySolution {
            t: 0.0,
            vel_mps: Vector3::zeros(),
            clock_drift_mps: 0.0,
            covariance: nalgebra::Matrix4::identity() * 1e-6,
            residuals_mps: vec![],
        };
        let mut s = EkfState::initialize(&base, Some(&zero_vel), &cfg).unwrap();
        for k in 1..200 {
            let mut e = base.clone();
            e.t = k as f64;
            s = ekf_spp_step(s, &e, Some(&zero_vel), &cfg).unwrap().0;
        }
        assert!((s.position() - wls.state.pos_m).norm() < 1e-3);
    }

    #[test]
    fn update_order_invariance() {
        let cfg = EkfConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut e = epoch(&ids());
        let s0 = EkfState::initialize(&e, None, &cfg).unwrap();
        e.t = 1.0;
        for o in &mut e.observations {
            o.pseudorange_m += rng.random_range(-10.0..10.0);
        }
        let a = ekf_spp_step(s0.clone(), &e, None, &cfg).unwrap().0;
        let mut shuffled = e.clone();
        shuffled.observations.reverse();
        shuffled.observations.swap(1, 4);
        let b = ekf_spp_step(s0, &shuffled, None, &cfg).unwrap().0;
        assert!((&a.x - &b.x).amax() < 1e-9, "{}", (&a.x - &b.x).amax());
    }

    #[test]
    fn gate_limits_outlier_pull() {
        let e = epoch(&ids());
        let plain = EkfConfig::default();
        let gated = EkfConfig {
            gate: Some(CHI2_999_1DOF),
            ..plain
        };
        let mut bad = e.clone();
        bad.t = 1.0;
        bad.observations[2].pseudorange_m += 100.0;
        let run = |cfg: &EkfConfig| {
            let s = EkfState::initialize(&e, None, cfg).unwrap();
            let s = ekf_spp_step(s, &bad, None, cfg).unwrap().0;
            (s.position() - truth_pos()).norm()
        };
        assert!(run(&gated) < run(&plain));
    }

    #[test]
    fn new_constellation_adds_clock() {
        let cfg = EkfConfig::default();
        let gps: Vec<SatId> = (1..=6).map(SatId::gps).collect();
        let s = EkfState::initialize(&epoch(&gps), None, &cfg).unwrap();
        assert_eq!(s.dim(), 8);
        let mut e = epoch(&ids());
        e.t = 1.0;
        let (s, _) = ekf_spp_step(s, &e, None, &cfg).unwrap();
        assert_eq!(s.dim(), 9);
        assert_eq!(s.clocks, vec![Constellation::Gps, Constellation::BeiDou]);
    }

    fn psd_ok(p: &DMatrix<f64>) -> bool {
        let asym = (p - p.transpose()).amax();
        let min_eig = p.clone().symmetric_eigenvalues().min();
        asym == 0.0 && min_eig >= -1e-9 * p.amax().max(1.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(4))]
        #[test]
        fn covariance_stays_psd(seed in 0u64..1000) {
            let cfg = EkfConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = epoch(&ids());
            let mut s = EkfState::initialize(&base, None, &cfg).unwrap();
            let mut t = 0.0;
            for _ in 0..250 {
                t += rng.random_range(0.1..3.0);
                let mut e = base.clone();
                e.t = t;
                let keep = rng.random_range(0..=e.observations.len());
                e.observations.truncate(keep);
                for o in &mut e.observations {
                    o.pseudorange_m += rng.random_range(-30.0..30.0);
                }
                s = ekf_spp_step(s, &e, None, &cfg).unwrap().0;
                prop_assert!(psd_ok(&s.p));
            }
        }
    }
}
