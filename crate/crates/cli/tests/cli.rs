use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gnss-fgo"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, preset: &str, seed: &str, extra: &[&str]) {
    let mut args = vec!["simulate", "--preset", preset, "--seed", seed, "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn mean_of(table: &str, method: &str) -> f64 {
    table
        .lines()
        .find(|l| l.starts_with(&format!("{method},")))
        .and_then(|l| l.split(',').nth(1))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn simulate_and_pipelines_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        simulate(d, "rtk-static", "11", &["--duration", "40"]);
        let rover = d.join("rover.jsonl");
        let base = d.join("base.jsonl");
        for (cmd, out) in [("spp-wls", "wls.csv"), ("spp-ekf", "ekf.csv"), ("spp-fgo", "fgo.csv")] {
            ok(&[cmd, "--input", p(&rover), "--out", p(&d.join(out))]);
        }
        for (cmd, out) in [("rtk-ekf", "rtk_ekf.csv"), ("rtk-fgo", "rtk_fgo.csv")] {
            ok(&[cmd, "--input", p(&rover), "--base", p(&base), "--out", p(&d.join(out))]);
        }
    }
    for f in [
        "rover.jsonl",
        "base.jsonl",
        "truth.json",
        "wls.csv",
        "ekf.csv",
        "fgo.csv",
        "rtk_ekf.csv",
        "rtk_fgo.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn spp_fgo_full_batch_writes_solution_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "urban-low", "2", &["--duration", "30"]);
    let out = d.join("sol.csv");
    ok(&[
        "spp-fgo",
        "--input",
        p(&d.join("rover.jsonl")),
        "--window",
        "0",
        "--out",
        p(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,E,N,U,status,n_sats,err_E,err_N,err_U"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|r| r.split(',').nth(4) == Some("FGO")));
}

#[test]
fn evaluate_matches_inline_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "urban-mid", "4", &["--duration", "60"]);
    let sol = d.join("wls.csv");
    let inline = ok(&[
        "spp-wls",
        "--input",
        p(&d.join("rover.jsonl")),
        "--truth",
        p(&d.join("truth.json")),
        "--out",
        p(&sol),
    ]);
    let table = ok(&["evaluate", "--solution", p(&sol), "--truth", p(&d.join("truth.json"))]);
    // CSV positions carry 0.1 mm resolution.
    assert!((mean_of(&inline, "wls") - mean_of(&table, "wls")).abs() < 1e-3);
}

#[test]
fn compare_reproduces_ordering_on_high_severity() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "urban-high", "7", &[]);
    let table = ok(&[
        "compare",
        "--input",
        p(&d.join("rover.jsonl")),
        "--truth",
        p(&d.join("truth.json")),
        "--methods",
        "wls,ekf,fgo",
    ]);
    let (w, e, f) = (mean_of(&table, "wls"), mean_of(&table, "ekf"), mean_of(&table, "fgo"));
    assert!(f < e && e < w, "{table}");
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "rtk-static", "1", &["--duration", "5"]);
    let rover = d.join("rover.jsonl");
    let out = d.join("x.csv");
    let code = |args: &[&str]| run(args).status.code();
    assert_eq!(code(&["rtk-fgo", "--input", p(&rover), "--out", p(&out)]), Some(2));
    assert_eq!(code(&["no-such-command"]), Some(2));
    assert_eq!(
        code(&["spp-wls", "--input", p(&rover), "--weights", "1,1,45", "--out", p(&out)]),
        Some(2)
    );
    assert_eq!(
        code(&["spp-ekf", "--input", p(&rover), "--doppler-sign", "2", "--out", p(&out)]),
        Some(2)
    );
    assert_eq!(
        code(&["compare", "--input", p(&rover), "--truth", p(&d.join("truth.json")), "--methods", "wls,rtk-fgo"]),
        Some(2)
    );
    assert_eq!(code(&["compare", "--input", p(&rover), "--methods", "wls,bogus"]), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = d.join("x.csv");
    assert_eq!(
        run(&["spp-wls", "--input", p(&d.join("missing.jsonl")), "--out", p(&out)]).status.code(),
        Some(1)
    );
    let bad = d.join("bad.jsonl");
    fs::write(&bad, "{\"schema_version\":1}\n{\"t\":0.0,\"observations\":[\n").unwrap();
    let o = run(&["spp-wls", "--input", p(&bad), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "urban-high", "5", &["--duration", "40"]);
    let cfg = d.join("cfg.toml");
    fs::write(&cfg, "[pipeline.fgo]\nwindow = 5\n").unwrap();
    let rover = d.join("rover.jsonl");
    let run_fgo = |extra: &[&str], out: &Path| {
        let mut args = vec!["--config", p(&cfg), "spp-fgo", "--input", p(&rover), "--out", p(out)];
        args.extend_from_slice(extra);
        ok(&args);
        fs::read(out).unwrap()
    };
    let windowed = run_fgo(&[], &d.join("w.csv"));
    let batch_flag = run_fgo(&["--window", "0"], &d.join("b.csv"));
    ok(&["spp-fgo", "--input", p(&rover), "--out", p(&d.join("plain.csv"))]);
    let plain = fs::read(d.join("plain.csv")).unwrap();
    assert_eq!(batch_flag, plain);
    assert_ne!(windowed, plain);
}

#[test]
fn simulate_writes_base_with_position_header() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "rtk-static", "3", &["--duration", "3", "--noiseless"]);
    let base = fs::read_to_string(d.join("base.jsonl")).unwrap();
    let header = base.lines().next().unwrap();
    assert!(header.contains("\"schema_version\":1") && header.contains("position_m"));
    simulate(&d.join("spp"), "urban-low", "3", &["--duration", "3"]);
    assert!(!d.join("spp/base.jsonl").exists());
}
