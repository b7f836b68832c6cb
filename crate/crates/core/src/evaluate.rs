//! Per-epoch solution records and horizontal ENU error metrics.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EnuFrame;
use crate::simulator::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SolutionStatus {
    Wls,
    Ekf,
    Fgo,
    RtkFloat,
    RtkFixed,
}

impl SolutionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolutionStatus::Wls => "WLS",
            SolutionStatus::Ekf => "EKF",
            SolutionStatus::Fgo => "FGO",
            SolutionStatus::RtkFloat => "RTK_FLOAT",
            SolutionStatus::RtkFixed => "RTK_FIXED",
        }
    }

    pub fn is_rtk(self) -> bool {
        matches!(self, SolutionStatus::RtkFloat | SolutionStatus::RtkFixed)
    }
}

impl std::str::FromStr for SolutionStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "WLS" => SolutionStatus::Wls,
            "EKF" => SolutionStatus::Ekf,
            "FGO" => SolutionStatus::Fgo,
            "RTK_FLOAT" => SolutionStatus::RtkFloat,
            "RTK_FIXED" => SolutionStatus::RtkFixed,
            _ => return Err(Error::InvalidConfig(format!("unknown solution status {s}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub t: f64,
    pub pos_m: Vector3<f64>,
    pub status: SolutionStatus,
    /// Error in the local ENU frame, filled in by [`attach_errors`].
    pub enu_error_m: Option<Vector3<f64>>,
    pub n_sats: usize,
}

impl SolutionRecord {
    pub fn new(t: f64, pos_m: Vector3<f64>, status: SolutionStatus, n_sats: usize) -> Self {
        Self {
            t,
            pos_m,
            status,
            enu_error_m: None,
            n_sats,
        }
    }

    pub fn horizontal_error(&self) -> Option<f64> {
        self.enu_error_m.map(|e| e.x.hypot(e.y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n_epochs: usize,
    pub n_solutions: usize,
    pub mean_m: f64,
    /// Population standard deviation.
    pub std_m: f64,
    pub max_m: f64,
    pub availability_pct: f64,
    /// Only reported when the records contain RTK solutions.
    pub fixed_rate_pct: Option<f64>,
}

fn match_tolerance(t: &[f64]) -> f64 {
    if t.len() < 2 {
        return 1e-6;
    }
    let mut dts: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    dts.sort_by(f64::total_cmp);
    0.5 * dts[dts.len() / 2]
}

/// Index of the truth epoch nearest to `t`, if within tolerance.
fn nearest(truth_t: &[f64], t: f64, tol: f64) -> Option<usize> {
    let i = truth_t.partition_point(|&x| x < t);
    [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter(|&j| j < truth_t.len())
        .min_by(|&a, &b| (truth_t[a] - t).abs().total_cmp(&(truth_t[b] - t).abs()))
        .filter(|&j| (truth_t[j] - t).abs() <= tol)
}

/// Fills `enu_error_m` for every record aligned with a truth epoch. Returns the
/// matched truth index per record.
pub fn attach_errors(records: &mut [SolutionRecord], truth: &GroundTruth) -> Result<Vec<Option<usize>>> {
    let frame = EnuFrame::new(truth.enu_origin_m)?;
    let tol = match_tolerance(&truth.t);
    let idx: Vec<Option<usize>> = records
        .iter_mut()
        .map(|r| {
            let j = nearest(&truth.t, r.t, tol);
            r.enu_error_m = j.map(|j| frame.rotate(&(r.pos_m - truth.pos_m[j])));
            j
        })
        .collect();
    if idx.iter().all(Option::is_none) {
        return Err(Error::NoOverlap);
    }
    Ok(idx)
}

/// Horizontal error statistics over the truth epochs. Availability counts
/// truth epochs with at least one aligned solution; the fixed rate counts
/// truth epochs whose aligned solution is `RtkFixed`.
pub fn evaluate(records: &[SolutionRecord], truth: &GroundTruth) -> Result<MetricsSummary> {
    let mut records = records.to_vec();
    let idx = attach_errors(&mut records, truth)?;
    let mut per_epoch: Vec<Option<&SolutionRecord>> = vec![None; truth.t.len()];
    for (r, j) in records.iter().zip(&idx) {
        if let Some(j) = *j {
            let slot = &mut per_epoch[j];
            let closer = slot.is_none_or(|s| (r.t - truth.t[j]).abs() < (s.t - truth.t[j]).abs());
            if closer {
                *slot = Some(r);
            }
        }
    }
    let errs: Vec<f64> = per_epoch.iter().flatten().filter_map(|r| r.horizontal_error()).collect();
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let total = truth.t.len() as f64;
    let fixed = per_epoch.iter().flatten().filter(|r| r.status == SolutionStatus::RtkFixed).count();
    Ok(MetricsSummary {
        n_epochs: truth.t.len(),
        n_solutions: errs.len(),
        mean_m: mean,
        std_m: var.sqrt(),
        max_m: errs.iter().copied().fold(0.0, f64::max),
        availability_pct: 100.0 * n / total,
        fixed_rate_pct: records
            .iter()
            .any(|r| r.status.is_rtk())
            .then(|| 100.0 * fixed as f64 / total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use crate::geometry::{geodetic_to_ecef, Geodetic};

    fn truth(n: usize) -> (GroundTruth, EnuFrame) {
        let origin = geodetic_to_ecef(&Geodetic {
            lat: 0.4,
            lon: 2.0,
            height: 30.0,
        });
        let frame = EnuFrame::new(origin).unwrap();
        let pos: Vec<Vector3<f64>> = (0..n).map(|k| frame.to_ecef(&Vector3::new(k as f64, 0.0, 0.0))).collect();
        let g = GroundTruth {
            t: (0..n).map(|k| k as f64).collect(),
            pos_m: pos,
            vel_mps: vec![Vector3::zeros(); n],
            clock_bias_m: vec![BTreeMap::new(); n],
            clock_drift_mps: vec![0.0; n],
            nlos: vec![Default::default(); n],
            rover_ambiguities: BTreeMap::new(),
            base_ambiguities: BTreeMap::new(),
            base_pos_m: None,
            enu_origin_m: origin,
        };
        (g, frame)
    }

    fn offset(g: &GroundTruth, f: &EnuFrame, k: usize, enu: [f64; 3], status: SolutionStatus) -> SolutionRecord {
        let p = g.pos_m[k] + f.rotation.transpose() * Vector3::from(enu);
        SolutionRecord::new(g.t[k] + 0.1, p, status, 8)
    }

    #[test]
    fn perfect_solutions() {
        let (g, f) = truth(5);
        let recs: Vec<_> = (0..5).map(|k| offset(&g, &f, k, [0.0; 3], SolutionStatus::Fgo)).collect();
        let m = evaluate(&recs, &g).unwrap();
        assert!(m.mean_m < 1e-9 && m.std_m < 1e-9 && m.max_m < 1e-9);
        assert_eq!(m.availability_pct, 100.0);
        assert_eq!(m.fixed_rate_pct, None);
    }

    #[test]
    fn two_epoch_hand_example() {
        let (g, f) = truth(2);
        let recs = vec![
            offset(&g, &f, 0, [3.0, 0.0, 7.0], SolutionStatus::Wls),
            offset(&g, &f, 1, [0.0, -4.0, -2.0], SolutionStatus::Wls),
        ];
        let m = evaluate(&recs, &g).unwrap();
        assert!((m.mean_m - 3.5).abs() < 1e-9);
        assert!((m.max_m - 4.0).abs() < 1e-9);
        assert!((m.std_m - 0.5).abs() < 1e-9);
    }

    #[test]
    fn fixed_rate_counts() {
        let (g, f) = truth(100);
        let recs: Vec<_> = (0..100)
            .map(|k| {
                let s = if k % 20 == 3 { SolutionStatus::RtkFixed } else { SolutionStatus::RtkFloat };
                offset(&g, &f, k, [0.1, 0.0, 0.0], s)
            })
            .collect();
        let m = evaluate(&recs, &g).unwrap();
        assert_eq!(m.fixed_rate_pct, Some(5.0));
    }

    #[test]
    fn availability_and_alignment() {
        let (g, f) = truth(10);
        let mut recs: Vec<_> = (0..10).step_by(2).map(|k| offset(&g, &f, k, [1.0, 1.0, 0.0], SolutionStatus::Ekf)).collect();
        // Off-grid by more than half an interval: dropped.
        recs.push(SolutionRecord::new(20.0, g.pos_m[9], SolutionStatus::Ekf, 4));
        let m = evaluate(&recs, &g).unwrap();
        assert_eq!(m.n_solutions, 5);
        assert_eq!(m.availability_pct, 50.0);
        assert!((m.mean_m - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn no_overlap() {
        let (g, _) = truth(3);
        let recs = vec![SolutionRecord::new(100.0, g.pos_m[0], SolutionStatus::Wls, 5)];
        assert!(matches!(evaluate(&recs, &g), Err(Error::NoOverlap)));
    }

    #[test]
    fn spreadsheet_fixture() {
        // Errors (E, N) per epoch; horizontal norms computed by hand:
        // 5, 13, 1, 0, 2, 10, 17, 0.5, 25, 3 -> sum 76.5, mean 7.65,
        // sum of squares 1222.25 -> var 122.225 - 58.5225 = 63.7025.
        let en = [
            (3.0, 4.0),
            (5.0, 12.0),
            (0.0, -1.0),
            (0.0, 0.0),
            (-2.0, 0.0),
            (6.0, -8.0),
            (8.0, 15.0),
            (0.3, 0.4),
            (-7.0, -24.0),
            (0.0, 3.0),
        ];
        let (g, f) = truth(10);
        let recs: Vec<_> = en
            .iter()
            .enumerate()
            .map(|(k, (e, n))| offset(&g, &f, k, [*e, *n, 1.0], SolutionStatus::Fgo))
            .collect();
        let m = evaluate(&recs, &g).unwrap();
        assert!((m.mean_m - 7.65).abs() < 1e-9);
        assert!((m.std_m - 63.7025f64.sqrt()).abs() < 1e-9);
        assert!((m.max_m - 25.0).abs() < 1e-9);
    }
}
