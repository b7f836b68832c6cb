//! `gnss-fgo` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gnss_fgo::evaluate::{attach_errors, evaluate, SolutionRecord};
use gnss_fgo::geometry::{geodetic_to_ecef, EnuFrame, Geodetic};
use gnss_fgo::io;
use gnss_fgo::measurement::WeightModel;
use gnss_fgo::nalgebra::Vector3;
use gnss_fgo::pipeline::{run_method, Method, PipelineConfig};
use gnss_fgo::simulator::{self, generate, ScenarioConfig, Severity};
use gnss_fgo::types::Epoch;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "gnss-fgo", version, about = "GNSS SPP and RTK by factor-graph optimization, with WLS/EKF baselines")]
struct Cli {
    /// TOML file with `[pipeline]` and `[scenario]` tables; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario (rover, optional base, ground truth).
    Simulate(SimulateArgs),
    /// Per-epoch weighted least squares.
    SppWls(SppArgs),
    /// Pseudorange + Doppler-velocity EKF.
    SppEkf(SppArgs),
    /// Factor-graph optimization over pseudorange and Doppler-velocity factors.
    SppFgo(SppArgs),
    /// RTK EKF with LAMBDA fixing.
    RtkEkf(RtkArgs),
    /// RTK factor-graph optimization with LAMBDA fixing.
    RtkFgo(RtkArgs),
    /// Horizontal error metrics of a solution file against ground truth.
    Evaluate(EvaluateArgs),
    /// Run several methods on one input and print a metrics table.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    UrbanLow,
    UrbanMid,
    UrbanHigh,
    RtkStatic,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "urban-high")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration: Option<f64>,
    /// NLOS probability per satellite-epoch.
    #[arg(long)]
    nlos_prob: Option<f64>,
    /// Disable all noise, clock wander and NLOS.
    #[arg(long)]
    noiseless: bool,
    /// Output directory for rover.jsonl, base.jsonl and truth.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CommonArgs {
    /// Rover epoch file.
    #[arg(long)]
    input: PathBuf,
    /// Ground truth; adds error columns and prints metrics.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// ENU origin as `lat_deg,lon_deg,height_m`.
    #[arg(long, value_parser = parse_origin)]
    enu_origin: Option<Vector3<f64>>,
    /// Pseudorange weight model `a,b,S0,k,sigma0`.
    #[arg(long, value_parser = parse_weights)]
    weights: Option<WeightModel>,
    #[arg(long, allow_hyphen_values = true, value_parser = parse_sign)]
    doppler_sign: Option<f64>,
    /// Sliding window length in epochs; 0 is full batch.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args)]
struct SppArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RtkArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Base station epoch file.
    #[arg(long)]
    base: PathBuf,
    /// Base position `x,y,z` (ECEF m); defaults to the base file header.
    #[arg(long, value_parser = parse_xyz)]
    base_pos: Option<Vector3<f64>>,
    #[arg(long)]
    ratio_threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    solution: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_parser = parse_origin)]
    enu_origin: Option<Vector3<f64>>,
    /// Metrics CSV; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, value_parser = parse_xyz)]
    base_pos: Option<Vector3<f64>>,
    #[arg(long)]
    ratio_threshold: Option<f64>,
    /// Comma-separated subset of wls, ekf, fgo, rtk-ekf, rtk-fgo.
    #[arg(long, value_delimiter = ',', default_value = "wls,ekf,fgo")]
    methods: Vec<Method>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    pipeline: PipelineConfig,
    scenario: Option<ScenarioConfig>,
}

fn nums(s: &str, n: usize) -> std::result::Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("'{x}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated numbers"));
    }
    Ok(v)
}

fn parse_weights(s: &str) -> std::result::Result<WeightModel, String> {
    let v = nums(s, 5)?;
    let w = WeightModel {
        el_a: v[0],
        el_b: v[1],
        snr_s0_dbhz: v[2],
        snr_k: v[3],
        sigma0_m: v[4],
    };
    w.validate().map_err(|e| e.to_string())?;
    Ok(w)
}

fn parse_origin(s: &str) -> std::result::Result<Vector3<f64>, String> {
    let v = nums(s, 3)?;
    Ok(geodetic_to_ecef(&Geodetic {
        lat: v[0].to_radians(),
        lon: v[1].to_radians(),
        height: v[2],
    }))
}

fn parse_xyz(s: &str) -> std::result::Result<Vector3<f64>, String> {
    let v = nums(s, 3)?;
    Ok(Vector3::new(v[0], v[1], v[2]))
}

fn parse_sign(s: &str) -> std::result::Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if v == 1.0 || v == -1.0 => Ok(v),
        _ => Err("doppler sign must be 1 or -1".into()),
    }
}

/// Usage errors detected after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(p) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    toml::from_str(&text).map_err(|e| anyhow!(UsageError(format!("{}: {e}", p.display()))))
}

fn pipeline_config(file: &FileConfig, common: &CommonArgs, ratio: Option<f64>) -> PipelineConfig {
    let mut cfg = file.pipeline;
    if let Some(w) = common.weights {
        cfg.weights = w;
    }
    if let Some(s) = common.doppler_sign {
        cfg.doppler.doppler_sign = s;
    }
    if let Some(w) = common.window {
        cfg.fgo.window = w;
    }
    if let Some(r) = ratio {
        cfg.ratio_threshold = r;
    }
    cfg.propagate();
    cfg
}

struct Inputs {
    rover: Vec<Epoch>,
    base: Option<(Vec<Epoch>, Vector3<f64>)>,
    truth: Option<simulator::GroundTruth>,
}

fn load_inputs(common: &CommonArgs, base: Option<&Path>, base_pos: Option<Vector3<f64>>) -> Result<Inputs> {
    let rover = io::read_epochs(&common.input)?;
    let base = match base {
        Some(p) => {
            let f = io::read_epoch_file(p)?;
            let pos = base_pos
                .or(f.header.position_m)
                .ok_or_else(|| anyhow!(UsageError("base position unknown: pass --base-pos".into())))?;
            Some((f.epochs, pos))
        }
        None => None,
    };
    let truth = common.truth.as_deref().map(io::read_truth).transpose()?;
    Ok(Inputs { rover, base, truth })
}

fn output_frame(origin: Option<Vector3<f64>>, truth: Option<&simulator::GroundTruth>, records: &[SolutionRecord]) -> Result<EnuFrame> {
    let o = origin
        .or(truth.map(|t| t.enu_origin_m))
        .or(records.first().map(|r| r.pos_m))
        .ok_or_else(|| anyhow!("no solutions produced"))?;
    Ok(EnuFrame::new(o)?)
}

fn run_single(method: Method, common: &CommonArgs, rtk: Option<&RtkArgs>, file: &FileConfig, out: &Path) -> Result<()> {
    let cfg = pipeline_config(file, common, rtk.and_then(|r| r.ratio_threshold));
    let inputs = load_inputs(common, rtk.map(|r| r.base.as_path()), rtk.and_then(|r| r.base_pos))?;
    let base = inputs.base.as_ref().map(|(e, p)| (e.as_slice(), p));
    let mut records = run_method(method, &inputs.rover, base, &cfg)?;
    if let Some(t) = &inputs.truth {
        attach_errors(&mut records, t)?;
        let m = evaluate(&records, t)?;
        print!("{}", io::format_metrics(&[(method.name().to_string(), m)]));
    }
    let frame = output_frame(common.enu_origin, inputs.truth.as_ref(), &records)?;
    io::write_solutions(out, &records, &frame)?;
    log::info!("{}: {} solutions written to {}", method.name(), records.len(), out.display());
    Ok(())
}

fn simulate(args: &SimulateArgs, file: &FileConfig) -> Result<()> {
    let mut cfg = match (&file.scenario, args.preset) {
        (Some(s), _) => s.clone(),
        (None, Preset::UrbanLow) => simulator::urban_canyon_preset(Severity::Low),
        (None, Preset::UrbanMid) => simulator::urban_canyon_preset(Severity::Mid),
        (None, Preset::UrbanHigh) => simulator::urban_canyon_preset(Severity::High),
        (None, Preset::RtkStatic) => simulator::rtk_static_preset(0.15),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = args.duration {
        cfg.duration_s = d;
    }
    if let Some(p) = args.nlos_prob {
        cfg.nlos.prob_per_sat_epoch = p;
    }
    if args.noiseless {
        cfg = cfg.noiseless();
    }
    let sc = generate(&cfg).map_err(|e| anyhow!(UsageError(e.to_string())))?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    io::write_epochs(&args.out.join("rover.jsonl"), &sc.rover)?;
    if let Some(base) = &sc.base {
        let header = io::EpochFileHeader {
            position_m: sc.truth.base_pos_m,
            ..io::EpochFileHeader::default()
        };
        io::write_epoch_file(&args.out.join("base.jsonl"), &header, base)?;
    }
    io::write_truth(&args.out.join("truth.json"), &sc.truth)?;
    log::info!("{} epochs written to {}", sc.rover.len(), args.out.display());
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let truth = io::read_truth(&args.truth)?;
    let frame = EnuFrame::new(args.enu_origin.unwrap_or(truth.enu_origin_m))?;
    let records = io::read_solutions(&args.solution, &frame)?;
    let name = args
        .solution
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let table = io::format_metrics(&[(name, evaluate(&records, &truth)?)]);
    match &args.out {
        Some(p) => io::write_text(p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn compare(args: &CompareArgs, file: &FileConfig) -> Result<()> {
    let Some(_) = &args.common.truth else {
        bail!(UsageError("compare needs --truth".into()));
    };
    if args.methods.iter().any(|m| m.needs_base()) && args.base.is_none() {
        bail!(UsageError("RTK methods need --base".into()));
    }
    let cfg = pipeline_config(file, &args.common, args.ratio_threshold);
    let inputs = load_inputs(&args.common, args.base.as_deref(), args.base_pos)?;
    let truth = inputs.truth.as_ref().unwrap();
    let base = inputs.base.as_ref().map(|(e, p)| (e.as_slice(), p));
    let mut rows = Vec::new();
    for m in &args.methods {
        let records = run_method(*m, &inputs.rover, base, &cfg)?;
        rows.push((m.name().to_string(), evaluate(&records, truth)?));
    }
    let table = io::format_metrics(&rows);
    print!("{table}");
    if let Some(p) = &args.out {
        io::write_text(p, &table)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Simulate(a) => simulate(a, &file),
        Command::SppWls(a) => run_single(Method::Wls, &a.common, None, &file, &a.out),
        Command::SppEkf(a) => run_single(Method::Ekf, &a.common, None, &file, &a.out),
        Command::SppFgo(a) => run_single(Method::Fgo, &a.common, None, &file, &a.out),
        Command::RtkEkf(a) => run_single(Method::RtkEkf, &a.common, Some(a), &file, &a.out),
        Command::RtkFgo(a) => run_single(Method::RtkFgo, &a.common, Some(a), &file, &a.out),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Compare(a) => compare(a, &file),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
