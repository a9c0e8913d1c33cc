//! End-to-end tests of the command-line surface: files, exit codes,
//! overrides, determinism of emitted CSVs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_platoon-cascade"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn run_writes_summary_and_assignment_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenarios_dir().join("two_vehicle.toml");
    run_ok(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--event-log",
    ]);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("# platoon-cascade v1\n"));
    assert!(summary.lines().count() == 3);
    let assignments = std::fs::read_to_string(dir.path().join("assignments.csv")).unwrap();
    assert!(assignments.contains("decided_at_s,junction,leader_id"));
    // One coordinated pair in the shipped scenario.
    assert_eq!(assignments.lines().count(), 3);
    assert!(dir.path().join("events.log").exists());
}

#[test]
fn missing_od_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("broken.toml");
    let cfg = std::fs::read_to_string(scenarios_dir().join("single_junction.toml"))
        .unwrap()
        .replace("../data/single_junction_od.csv", "no_such_file.csv");
    std::fs::write(&cfg_path, cfg).unwrap();
    let out = bin()
        .args(["run", "--config", cfg_path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("no_such_file.csv"),
        "diagnostic must name the missing path: {stderr}"
    );
}

#[test]
fn unknown_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenarios_dir().join("two_vehicle.toml");
    let out = bin()
        .args([
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--override",
            "nonsense.key=1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn junction_threshold_override_bounds_logged_headways() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenarios_dir().join("i210.toml");
    run_ok(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "junction.3.threshold_s=10",
        "--override",
        "sim.duration_s=3000",
    ]);
    let assignments = std::fs::read_to_string(dir.path().join("assignments.csv")).unwrap();
    let mut saw_junction_3 = false;
    for line in assignments.lines().skip(2) {
        let fields: Vec<&str> = line.split(',').collect();
        let junction: u32 = fields[1].parse().unwrap();
        let headway: f64 = fields[4].parse().unwrap();
        if junction == 3 {
            saw_junction_3 = true;
            assert!(headway < 10.0, "junction 3 headway {headway} >= overridden threshold");
        } else {
            assert!(headway < 20.0);
        }
    }
    assert!(saw_junction_3, "expected at least one junction-3 assignment");
}

#[test]
fn sweep_has_value_times_seed_rows_and_reruns_identically() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let cfg = scenarios_dir().join("single_junction.toml");
    let args = |out: &Path| {
        vec![
            "sweep".to_string(),
            "--config".into(),
            cfg.to_str().unwrap().into(),
            "--variable".into(),
            "threshold_all".into(),
            "--values".into(),
            "0,5,10,15,20,25".into(),
            "--replications".into(),
            "5".into(),
            "--override".into(),
            "sim.duration_s=1200".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    run_ok(&args(dir_a.path()).iter().map(String::as_str).collect::<Vec<_>>());
    let sweep_a = std::fs::read_to_string(dir_a.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep_a.lines().count(), 2 + 30, "6 values x 5 seeds");
    // Byte-identical on rerun.
    run_ok(&args(dir_b.path()).iter().map(String::as_str).collect::<Vec<_>>());
    let sweep_b = std::fs::read_to_string(dir_b.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep_a, sweep_b);
}

#[test]
fn single_cell_grid_matches_sweep_point() {
    let dir_grid = tempfile::tempdir().unwrap();
    let dir_sweep = tempfile::tempdir().unwrap();
    let cfg = scenarios_dir().join("i210.toml");
    run_ok(&[
        "grid",
        "--config",
        cfg.to_str().unwrap(),
        "--junction-a",
        "4",
        "--junction-b",
        "5",
        "--values-a",
        "20",
        "--values-b",
        "20",
        "--override",
        "sim.duration_s=2500",
        "--out",
        dir_grid.path().to_str().unwrap(),
    ]);
    // The same point via a sweep holding junction 4 = 20 (scenario default
    // already has every junction at 20 s).
    run_ok(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--variable",
        "threshold@4",
        "--values",
        "20",
        "--replications",
        "1",
        "--override",
        "sim.duration_s=2500",
        "--out",
        dir_sweep.path().to_str().unwrap(),
    ]);
    let grid = std::fs::read_to_string(dir_grid.path().join("grid.csv")).unwrap();
    let grid_fuel: f64 = grid.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
    let sweep = std::fs::read_to_string(dir_sweep.path().join("sweep.csv")).unwrap();
    let sweep_fuel: f64 = sweep.lines().last().unwrap().split(',').nth(5).unwrap().parse().unwrap();
    assert_eq!(grid_fuel, sweep_fuel);
}

#[test]
fn baseline_equals_zero_threshold_run_byte_exact() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let cfg = scenarios_dir().join("single_junction.toml");
    run_ok(&[
        "baseline",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--override",
        "sim.duration_s=1500",
        "--out",
        dir_a.path().to_str().unwrap(),
    ]);
    run_ok(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--override",
        "sim.duration_s=1500",
        "--override",
        "junction.all.threshold_s=0",
        "--out",
        dir_b.path().to_str().unwrap(),
    ]);
    let a = std::fs::read_to_string(dir_a.path().join("summary.csv")).unwrap();
    let b = std::fs::read_to_string(dir_b.path().join("summary.csv")).unwrap();
    assert_eq!(a, b);
    // A cav_ratio of zero makes run and baseline trivially identical too.
    let dir_c = tempfile::tempdir().unwrap();
    let dir_d = tempfile::tempdir().unwrap();
    for (cmd, dir) in [("run", &dir_c), ("baseline", &dir_d)] {
        run_ok(&[
            cmd,
            "--config",
            cfg.to_str().unwrap(),
            "--override",
            "fleet.cav_ratio=0",
            "--override",
            "fleet.background_ratio=0.4",
            "--override",
            "sim.duration_s=1200",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
    }
    let c = std::fs::read_to_string(dir_c.path().join("summary.csv")).unwrap();
    let d = std::fs::read_to_string(dir_d.path().join("summary.csv")).unwrap();
    assert_eq!(c, d);
}

#[test]
fn analytic_tabulates_costs_and_break_even() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenarios_dir().join("two_vehicle.toml");
    let out = run_ok(&[
        "analytic",
        "--config",
        cfg.to_str().unwrap(),
        "--d2",
        "10000",
        "--step",
        "5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("break-even threshold"));
    let csv = std::fs::read_to_string(dir.path().join("analytic.csv")).unwrap();
    assert!(csv.contains("headway_s,v_f_mps,d_f1_mL,d_f2_mL,d_tc_mL"));
    // The zone-cost column is monotone increasing.
    let mut prev = f64::NEG_INFINITY;
    for line in csv.lines().skip(3) {
        let d_f1: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(d_f1 >= prev);
        prev = d_f1;
    }
}

/// Emitted sweep files do not depend on the worker pool size.
#[test]
fn sweep_is_thread_count_independent() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let cfg = scenarios_dir().join("single_junction.toml");
    for (dir, threads) in [(&dir_a, "1"), (&dir_b, "8")] {
        let out = bin()
            .env("RAYON_NUM_THREADS", threads)
            .args([
                "sweep",
                "--config",
                cfg.to_str().unwrap(),
                "--variable",
                "threshold_all",
                "--values",
                "0,10,20",
                "--replications",
                "3",
                "--override",
                "sim.duration_s=1200",
                "--out",
                dir.path().to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let a = std::fs::read_to_string(dir_a.path().join("sweep.csv")).unwrap();
    let b = std::fs::read_to_string(dir_b.path().join("sweep.csv")).unwrap();
    assert_eq!(a, b);
}
