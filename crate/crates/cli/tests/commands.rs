//! Command-level tests: artifact layout, rerun determinism and the exit
//! code contract, exercised through the library and the binary.

use smp_lab_cli::{artifact_dir, Scenario};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn temp_root(label: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("smp-lab-cmd-{label}-{}", std::process::id()));
    fs::remove_dir_all(&dir).ok();
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn load(name: &str) -> Scenario {
    Scenario::load(&scenario_path(name)).unwrap()
}

/// Deterministic artifacts of a run directory (everything but timings).
fn artifact_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "timings.txt")
        .collect();
    names.sort();
    for name in names {
        out.push((name.clone(), fs::read(dir.join(name)).unwrap()));
    }
    out
}

#[test]
fn all_shipped_scenarios_parse() {
    for name in [
        "zero_dynamics.json",
        "pantograph.json",
        "geometric.json",
        "martingale_absde.json",
        "contraction.json",
        "lq_baseline.json",
        "lq_gradient.json",
        "riccati_nodelay.json",
        "smoke_lq.json",
        "smoke_general.json",
    ] {
        let s = Scenario::load(&scenario_path(name));
        assert!(s.is_ok(), "{name}: {:?}", s.err());
    }
}

#[test]
fn simulate_forward_artifacts_and_rerun_determinism() {
    let root = temp_root("fwd");
    let out_a = root.join("a");
    let out_b = root.join("b");
    smp_lab_cli::cmd_simulate_forward(load("smoke_general.json"), &out_a, true).unwrap();
    smp_lab_cli::cmd_simulate_forward(load("smoke_general.json"), &out_b, true).unwrap();

    let csv = fs::read_to_string(out_a.join("state_summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,mean,var,p05,p50,p95");
    assert_eq!(csv.lines().count(), 22); // header + 21 nodes

    let gaps = fs::read_to_string(out_a.join("picard_gaps.csv")).unwrap();
    assert!(gaps.starts_with("k,gap,ratio\n"));

    assert_eq!(artifact_bytes(&out_a), artifact_bytes(&out_b));
    fs::remove_dir_all(root).ok();
}

#[test]
fn shipped_forward_scenarios_match_their_documented_summaries() {
    let root = temp_root("shipped");

    // zero dynamics: X identically the initial state
    let s = smp_lab_cli::cmd_simulate_forward(load("zero_dynamics.json"), &root.join("zd"), true)
        .unwrap();
    let get = |summary: &smp_lab_cli::artifacts::RunSummary, key: &str| {
        summary
            .metrics
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .unwrap()
    };
    assert_eq!(get(&s, "terminal_mean"), 1.0);
    assert_eq!(get(&s, "terminal_var"), 0.0);
    assert_eq!(get(&s, "picard_iterations"), 1.0);

    // pantograph: deterministic terminal value near the series constant
    let s = smp_lab_cli::cmd_simulate_forward(load("pantograph.json"), &root.join("pg"), true)
        .unwrap();
    assert!((get(&s, "terminal_mean") - 2.2715).abs() < 2e-3);
    assert_eq!(get(&s, "terminal_var"), 0.0);

    // geometric: terminal mean near x0 e^T, Picard converged
    let s = smp_lab_cli::cmd_simulate_forward(load("geometric.json"), &root.join("geo"), true)
        .unwrap();
    let mean = get(&s, "terminal_mean");
    assert!((mean - 1.0f64.exp()).abs() < 0.1, "terminal mean {mean}");
    assert!(get(&s, "picard_last_gap") <= 1e-25);
    fs::remove_dir_all(root).ok();
}

#[test]
fn solve_absde_writes_solution_summaries() {
    let root = temp_root("absde");
    let summary = smp_lab_cli::cmd_solve_absde(load("smoke_lq.json"), &root, true).unwrap();
    assert!(root.join("y_summary.csv").exists());
    assert!(root.join("z_summary.csv").exists());
    assert!(root.join("absde_gaps.csv").exists());
    assert!(summary.metrics.iter().any(|(k, _)| k == "beta_norm"));
    let rendered = fs::read_to_string(root.join("run_summary.txt")).unwrap();
    assert!(rendered.contains("config_digest:"));
    fs::remove_dir_all(root).ok();
}

#[test]
fn solve_lq_passes_certificate_on_smoke_scenario() {
    let root = temp_root("lq");
    let summary = smp_lab_cli::cmd_solve_lq(load("smoke_lq.json"), &root, true).unwrap();
    assert!(summary.all_passed());
    assert!(root.join("trace.csv").exists());
    assert!(root.join("certificate_report.csv").exists());
    assert!(root.join("control_summary.csv").exists());
    fs::remove_dir_all(root).ok();
}

#[test]
fn gradient_check_reports_both_estimates() {
    let root = temp_root("grad");
    let summary = smp_lab_cli::cmd_gradient_check(load("smoke_lq.json"), &root, true).unwrap();
    let names: Vec<&str> = summary.metrics.iter().map(|(k, _)| k.as_str()).collect();
    for expected in ["adjoint_value", "fd_value", "rel_err", "richardson_spread"] {
        assert!(names.contains(&expected), "missing {expected}");
    }
    fs::remove_dir_all(root).ok();
}

#[test]
fn check_smp_flags_suboptimal_control() {
    // the smoke scenario's initial control is far from optimal, so the
    // variational inequality must fail and the command exits with the
    // acceptance-failure code
    let root = temp_root("smp");
    let err = smp_lab_cli::cmd_check_smp(load("smoke_lq.json"), &root, true).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(root.join("inequality_report.csv").exists());
    assert!(root.join("residual_summary.csv").exists());
    fs::remove_dir_all(root).ok();
}

#[test]
fn binary_exit_codes_and_overrides() {
    let bin = env!("CARGO_BIN_EXE_smp-lab");
    let root = temp_root("bin");

    // configuration error: missing file
    let out = Command::new(bin)
        .args(["solve-lq", "--config", "/nonexistent.json", "--quiet"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // wrong model block for the command
    let out = Command::new(bin)
        .args([
            "solve-lq",
            "--config",
            scenario_path("smoke_general.json").to_str().unwrap(),
            "--quiet",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // success with seed/path overrides
    let out = Command::new(bin)
        .args([
            "simulate-forward",
            "--config",
            scenario_path("smoke_lq.json").to_str().unwrap(),
            "--seed",
            "123",
            "--paths",
            "200",
            "--out",
            root.to_str().unwrap(),
            "--quiet",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary =
        fs::read_to_string(artifact_dir(&root, "smoke-lq", "simulate-forward").join("run_summary.txt"))
            .unwrap();
    assert!(summary.contains("seed: 123"));
    assert!(summary.contains("paths: 200"));
    fs::remove_dir_all(root).ok();
}

#[test]
fn binary_is_deterministic_across_thread_counts() {
    let bin = env!("CARGO_BIN_EXE_smp-lab");
    let root = temp_root("threads");
    let mut captured: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for threads in ["1", "4"] {
        let out_dir = root.join(format!("t{threads}"));
        let out = Command::new(bin)
            .args([
                "solve-lq",
                "--config",
                scenario_path("smoke_lq.json").to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--threads",
                threads,
                "--quiet",
            ])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        captured.push(artifact_bytes(&artifact_dir(&out_dir, "smoke-lq", "solve-lq")));
    }
    assert_eq!(captured[0], captured[1]);

    // the env var is the fallback for --threads and must give the same bytes
    let out_dir = root.join("env");
    let out = Command::new(bin)
        .env("SMP_LAB_THREADS", "2")
        .args([
            "solve-lq",
            "--config",
            scenario_path("smoke_lq.json").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--quiet",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        captured[0],
        artifact_bytes(&artifact_dir(&out_dir, "smoke-lq", "solve-lq"))
    );
    fs::remove_dir_all(root).ok();
}
