//! File formats: JSON-lines epoch files, CSV solution and metrics files, and
//! JSON ground truth.
//!
//! An epoch file starts with a header object carrying `schema_version` (and,
//! for reference receivers, the surveyed `position_m`), followed by one epoch
//! object per line.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evaluate::{MetricsSummary, SolutionRecord};
use crate::geometry::EnuFrame;
use crate::simulator::GroundTruth;
use crate::types::{Epoch, SatId, SatObservation};

pub const SCHEMA_VERSION: u32 = 1;

pub const SOLUTION_HEADER: &str = "t,E,N,U,status,n_sats,err_E,err_N,err_U";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochFileHeader {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_m: Option<Vector3<f64>>,
}

impl Default for EpochFileHeader {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            position_m: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochFile {
    pub header: EpochFileHeader,
    pub epochs: Vec<Epoch>,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn keys_of<T: Serialize>(v: &T) -> BTreeSet<String> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

static EPOCH_KEYS: LazyLock<BTreeSet<String>> = LazyLock::new(|| keys_of(&Epoch::new(0.0, vec![])));
static OBS_KEYS: LazyLock<BTreeSet<String>> = LazyLock::new(|| {
    keys_of(&SatObservation {
        sat_id: SatId::gps(1),
        pseudorange_m: 0.0,
        doppler_hz: None,
        carrier_phase_cycles: None,
        snr_dbhz: 0.0,
        sat_pos_m: Vector3::zeros(),
        sat_vel_mps: Vector3::zeros(),
        sat_clock_bias_m: 0.0,
        sat_clock_drift_mps: 0.0,
        iono_corr_m: 0.0,
        tropo_corr_m: 0.0,
        nlos_flag: false,
    })
});
static HEADER_KEYS: LazyLock<BTreeSet<String>> = LazyLock::new(|| {
    keys_of(&EpochFileHeader {
        position_m: Some(Vector3::zeros()),
        ..EpochFileHeader::default()
    })
});

fn warn_unknown(v: &Value, known: &BTreeSet<String>, line: usize, what: &str) {
    if let Value::Object(m) = v {
        for k in m.keys().filter(|k| !known.contains(*k)) {
            log::warn!("line {line}: ignoring unknown {what} field '{k}'");
        }
    }
}

fn parse_line(text: &str, line: usize) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::ParseError {
        line,
        column: e.column(),
        reason: e.to_string(),
    })
}

fn decode<T: for<'de> Deserialize<'de>>(v: Value, line: usize) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::ParseError {
        line,
        column: 0,
        reason: e.to_string(),
    })
}

pub fn parse_epochs<R: BufRead>(reader: R) -> Result<EpochFile> {
    let mut header: Option<EpochFileHeader> = None;
    let mut epochs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let text = line.map_err(|e| Error::Io(e.to_string()))?;
        if text.trim().is_empty() {
            continue;
        }
        let v = parse_line(&text, n)?;
        match &header {
            None => {
                warn_unknown(&v, &HEADER_KEYS, n, "header");
                let h: EpochFileHeader = decode(v, n)?;
                if h.schema_version != SCHEMA_VERSION {
                    return Err(Error::SchemaVersionMismatch {
                        expected: SCHEMA_VERSION,
                        found: h.schema_version,
                    });
                }
                header = Some(h);
            }
            Some(_) => {
                warn_unknown(&v, &EPOCH_KEYS, n, "epoch");
                if let Some(Value::Array(obs)) = v.get("observations") {
                    for o in obs {
                        warn_unknown(o, &OBS_KEYS, n, "observation");
                    }
                }
                epochs.push(decode(v, n)?);
            }
        }
    }
    let header = header.ok_or(Error::ParseError {
        line: 1,
        column: 0,
        reason: "missing schema_version header".into(),
    })?;
    Ok(EpochFile { header, epochs })
}

pub fn read_epoch_file(path: &Path) -> Result<EpochFile> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    parse_epochs(BufReader::new(f))
}

pub fn read_epochs(path: &Path) -> Result<Vec<Epoch>> {
    Ok(read_epoch_file(path)?.epochs)
}

pub fn format_epochs(header: &EpochFileHeader, epochs: &[Epoch]) -> Result<String> {
    let enc = |e: serde_json::Error| Error::Io(e.to_string());
    let mut out = serde_json::to_string(header).map_err(enc)?;
    out.push('\n');
    for e in epochs {
        out.push_str(&serde_json::to_string(e).map_err(enc)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_epoch_file(path: &Path, header: &EpochFileHeader, epochs: &[Epoch]) -> Result<()> {
    write_text(path, &format_epochs(header, epochs)?)
}

pub fn write_epochs(path: &Path, epochs: &[Epoch]) -> Result<()> {
    write_epoch_file(path, &EpochFileHeader::default(), epochs)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let s = serde_json::to_string(truth).map_err(|e| Error::Io(e.to_string()))?;
    write_text(path, &s)
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let s = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::ParseError {
        line: e.line(),
        column: e.column(),
        reason: e.to_string(),
    })
}

fn opt3(v: Option<Vector3<f64>>) -> [String; 3] {
    match v {
        Some(v) => [0, 1, 2].map(|i| format!("{:.4}", v[i])),
        None => [String::new(), String::new(), String::new()],
    }
}

/// Solution CSV with positions expressed in `frame`.
pub fn format_solutions(records: &[SolutionRecord], frame: &EnuFrame) -> String {
    let mut out = String::from(SOLUTION_HEADER);
    out.push('\n');
    for r in records {
        let enu = frame.to_enu(&r.pos_m);
        let [ee, en, eu] = opt3(r.enu_error_m);
        let _ = writeln!(
            out,
            "{:.3},{:.4},{:.4},{:.4},{},{},{ee},{en},{eu}",
            r.t,
            enu.x,
            enu.y,
            enu.z,
            r.status.as_str(),
            r.n_sats
        );
    }
    out
}

pub fn write_solutions(path: &Path, records: &[SolutionRecord], frame: &EnuFrame) -> Result<()> {
    write_text(path, &format_solutions(records, frame))
}

/// Reads a solution CSV back; positions are restored through `frame`.
pub fn parse_solutions(text: &str, frame: &EnuFrame) -> Result<Vec<SolutionRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SOLUTION_HEADER => {}
        _ => {
            return Err(Error::ParseError {
                line: 1,
                column: 1,
                reason: format!("expected header '{SOLUTION_HEADER}'"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(Error::ParseError {
                line: n,
                column: line.len(),
                reason: format!("expected 9 columns, found {}", cols.len()),
            });
        }
        let col_at = |k: usize| cols[..k].iter().map(|c| c.len() + 1).sum::<usize>() + 1;
        let num = |k: usize| -> Result<f64> {
            cols[k].trim().parse().map_err(|e| Error::ParseError {
                line: n,
                column: col_at(k),
                reason: format!("{e}"),
            })
        };
        let enu = Vector3::new(num(1)?, num(2)?, num(3)?);
        let status = cols[4].trim().parse().map_err(|_| Error::ParseError {
            line: n,
            column: col_at(4),
            reason: format!("unknown status '{}'", cols[4]),
        })?;
        let n_sats = cols[5].trim().parse().map_err(|e| Error::ParseError {
            line: n,
            column: col_at(5),
            reason: format!("{e}"),
        })?;
        out.push(SolutionRecord::new(num(0)?, frame.to_ecef(&enu), status, n_sats));
    }
    Ok(out)
}

pub fn read_solutions(path: &Path, frame: &EnuFrame) -> Result<Vec<SolutionRecord>> {
    let s = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_solutions(&s, frame)
}

pub const METRICS_HEADER: &str = "method,mean_m,std_m,max_m,availability_pct,fixed_rate_pct";

/// Side-by-side metrics table, one row per method.
pub fn format_metrics(rows: &[(String, MetricsSummary)]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (name, m) in rows {
        let fixed = m.fixed_rate_pct.map(|f| format!("{f:.2}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{name},{:.4},{:.4},{:.4},{:.2},{fixed}",
            m.mean_m, m.std_m, m.max_m, m.availability_pct
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::SolutionStatus;
    use crate::simulator::{generate, rtk_static_preset, ScenarioConfig};

    fn scenario() -> crate::simulator::Scenario {
        generate(&ScenarioConfig {
            duration_s: 100.0,
            ..rtk_static_preset(0.3)
        })
        .unwrap()
    }

    #[test]
    fn epochs_round_trip() {
        let sc = scenario();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.jsonl");
        write_epochs(&p, &sc.rover).unwrap();
        assert_eq!(read_epochs(&p).unwrap(), sc.rover);
        let header = EpochFileHeader {
            position_m: sc.truth.base_pos_m,
            ..EpochFileHeader::default()
        };
        write_epoch_file(&p, &header, sc.base.as_ref().unwrap()).unwrap();
        let f = read_epoch_file(&p).unwrap();
        assert_eq!(f.header, header);
        assert_eq!(&f.epochs, sc.base.as_ref().unwrap());
    }

    #[test]
    fn truth_round_trip() {
        let sc = scenario();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("truth.json");
        write_truth(&p, &sc.truth).unwrap();
        assert_eq!(read_truth(&p).unwrap(), sc.truth);
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let sc = scenario();
        let text = format_epochs(&EpochFileHeader::default(), &sc.rover[..2]).unwrap();
        let text = text
            .replacen("{\"schema_version\":1", "{\"schema_version\":1,\"producer\":\"x\"", 1)
            .replace("\"nlos_flag\"", "\"multipath_index\":3,\"nlos_flag\"")
            .replace("{\"t\":", "{\"receiver\":\"r1\",\"t\":");
        let f = parse_epochs(text.as_bytes()).unwrap();
        assert_eq!(f.epochs, sc.rover[..2]);
    }

    #[test]
    fn truncated_line_reports_position() {
        let sc = scenario();
        let text = format_epochs(&EpochFileHeader::default(), &sc.rover[..3]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let cut = format!("{}\n{}\n{}\n", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
        match parse_epochs(cut.as_bytes()) {
            Err(Error::ParseError { line, column, .. }) => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_version_checked() {
        let text = "{\"schema_version\":7}\n";
        assert!(matches!(
            parse_epochs(text.as_bytes()),
            Err(Error::SchemaVersionMismatch { expected: 1, found: 7 })
        ));
        assert!(matches!(parse_epochs("".as_bytes()), Err(Error::ParseError { line: 1, .. })));
    }

    #[test]
    fn solutions_round_trip() {
        let sc = scenario();
        let frame = EnuFrame::new(sc.truth.enu_origin_m).unwrap();
        let recs: Vec<SolutionRecord> = sc
            .truth
            .pos_m
            .iter()
            .zip(&sc.truth.t)
            .map(|(p, t)| SolutionRecord::new(*t, p + Vector3::new(1.0, -2.0, 0.5), SolutionStatus::RtkFloat, 9))
            .collect();
        let text = format_solutions(&recs, &frame);
        assert!(text.starts_with("t,E,N,U,status,n_sats,err_E,err_N,err_U\n"));
        let back = parse_solutions(&text, &frame).unwrap();
        for (a, b) in recs.iter().zip(&back) {
            assert!((a.pos_m - b.pos_m).norm() < 1e-3);
            assert_eq!((a.t, a.status, a.n_sats), (b.t, b.status, b.n_sats));
        }
        let bad = text.replace("RTK_FLOAT", "RTK_MAYBE");
        assert!(matches!(parse_solutions(&bad, &frame), Err(Error::ParseError { line: 2, .. })));
    }
}
