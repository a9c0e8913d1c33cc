//! Command-line scenario runner.
//!
//! Exit codes: 0 success, 1 simulation invariant violation, 2 config or
//! I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use platoon_cascade::harness::{self, GridSpec, SweepSpec, SweepVariable};
use platoon_cascade::output;
use platoon_cascade_core::config::{self, RawConfig};
use platoon_cascade_core::engine::{self, EngineError};
use platoon_cascade_core::fuel;
use platoon_cascade_core::network::NodeId;

#[derive(Parser)]
#[command(
    name = "platoon-cascade",
    about = "Deterministic platoon-coordination micro-simulator over a junction cascade",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write summary + assignment CSVs.
    Run(RunArgs),
    /// Run the scenario with every junction threshold forced to zero.
    Baseline(RunArgs),
    /// Sweep one variable over a list of values with paired seeds.
    Sweep(SweepArgs),
    /// Threshold heat map over two junctions.
    Grid(GridArgs),
    /// Tabulate the closed-form incremental cost and break-even threshold.
    Analytic(AnalyticArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Seed override (defaults to the scenario's `sim.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dotted-path config override, repeatable (e.g. junction.3.threshold_s=10).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Also write a line-oriented event log.
    #[arg(long)]
    event_log: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// One of: threshold_all, threshold@<junction>, d1_all, d2_tail,
    /// cav_ratio, background_ratio.
    #[arg(long)]
    variable: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Paired seeds per value.
    #[arg(long, default_value_t = 5)]
    replications: u32,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    junction_a: NodeId,
    #[arg(long)]
    junction_b: NodeId,
    #[arg(long, value_delimiter = ',', required = true)]
    values_a: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    values_b: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    replications: u32,
}

#[derive(Args)]
struct AnalyticArgs {
    #[command(flatten)]
    common: Common,
    /// Coordination radius; defaults to the first junction's d1.
    #[arg(long)]
    d1: Option<f64>,
    /// Cruising distance; defaults to the corridor tail past the last junction.
    #[arg(long)]
    d2: Option<f64>,
    /// Largest tabulated headway; defaults to 98% of the zone traverse time.
    #[arg(long)]
    headway_max: Option<f64>,
    /// Headway grid step.
    #[arg(long, default_value_t = 1.0)]
    step: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invariant = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<EngineError>(), Some(EngineError::InvariantViolation { .. })));
            if invariant {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run(args) => cmd_run(args, false),
        Cmd::Baseline(args) => cmd_run(args, true),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Grid(args) => cmd_grid(args),
        Cmd::Analytic(args) => cmd_analytic(args),
    }
}

fn load(common: &Common) -> Result<(RawConfig, PathBuf)> {
    let raw = config::load_raw(&common.config)?;
    let base = common
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((raw, base))
}

fn collect_overrides(common: &Common) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for expr in &common.overrides {
        if let Some((k, v)) = expr.split_once('=') {
            out.push((k.trim().to_string(), v.trim().to_string()));
        } else {
            // Let apply_override produce the diagnostic.
            out.push((expr.clone(), String::new()));
        }
    }
    if let Some(seed) = common.seed {
        out.push(("sim.seed".into(), seed.to_string()));
    }
    out
}

fn write_out(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn cmd_run(args: RunArgs, force_baseline: bool) -> Result<()> {
    let (raw, base) = load(&args.common)?;
    let mut overrides = collect_overrides(&args.common);
    if force_baseline {
        overrides.push(("junction.all.threshold_s".into(), "0".into()));
    }
    let mut raw = raw;
    for (k, v) in &overrides {
        config::apply_override(&mut raw, k, v)?;
    }
    if args.event_log {
        raw.sim.record_events = true;
    }
    let cfg = config::build(&raw, &base)?;
    let result = engine::run(&cfg)?;
    let summary = engine::summarize(&cfg, &result);
    let out = &args.common.out;
    let summary_path = write_out(out, "summary.csv", &output::summary_csv(&summary))?;
    write_out(out, "assignments.csv", &output::assignments_csv(&result))?;
    if args.event_log {
        write_out(out, "events.log", &output::event_log(&result))?;
    }
    println!(
        "{}: {} vehicles, {:.3} L fuel, {} platoons -> {}",
        if force_baseline { "baseline" } else { "run" },
        summary.vehicle_count,
        summary.fuel_total_l,
        summary.platoons_formed,
        summary_path.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (mut raw, base) = load(&args.common)?;
    for (k, v) in collect_overrides(&args.common) {
        config::apply_override(&mut raw, &k, &v)?;
    }
    let spec = SweepSpec {
        variable: SweepVariable::from_str(&args.variable)?,
        values: args.values,
        replications: args.replications,
        seed_base: args.common.seed.unwrap_or(raw.sim.seed),
    };
    let rows = harness::run_sweep(&raw, &base, &spec)?;
    let path = write_out(&args.common.out, "sweep.csv", &output::sweep_csv(&rows))?;
    println!("sweep: {} rows -> {}", rows.len(), path.display());
    Ok(())
}

fn cmd_grid(args: GridArgs) -> Result<()> {
    let (mut raw, base) = load(&args.common)?;
    for (k, v) in collect_overrides(&args.common) {
        config::apply_override(&mut raw, &k, &v)?;
    }
    let spec = GridSpec {
        junction_a: args.junction_a,
        junction_b: args.junction_b,
        values_a: args.values_a,
        values_b: args.values_b,
        replications: args.replications,
        seed_base: args.common.seed.unwrap_or(raw.sim.seed),
    };
    let cells = harness::run_grid(&raw, &base, &spec)?;
    let path = write_out(
        &args.common.out,
        "grid.csv",
        &output::grid_csv(spec.junction_a, spec.junction_b, &cells),
    )?;
    let best = harness::grid_argmin(&cells).expect("non-empty grid");
    println!(
        "grid: {} cells, min fuel {:.3} L at (r_a={}, r_b={}) -> {}",
        cells.len(),
        best.mean_fuel_ml / 1000.0,
        best.r_a,
        best.r_b,
        path.display()
    );
    Ok(())
}

fn cmd_analytic(args: AnalyticArgs) -> Result<()> {
    let (mut raw, base) = load(&args.common)?;
    for (k, v) in collect_overrides(&args.common) {
        config::apply_override(&mut raw, &k, &v)?;
    }
    let cfg = config::build(&raw, &base)?;
    let first = cfg
        .corridor
        .junctions()
        .first()
        .expect("validated corridor has junctions");
    let last = cfg.corridor.junctions().last().unwrap();
    let d1 = args.d1.unwrap_or(first.d1);
    let d2 = args.d2.unwrap_or(cfg.corridor.mainline_length() - last.position);
    let v0 = cfg.dynamics.v0_cruise;
    let t0 = d1 / v0;
    let headway_max = args.headway_max.unwrap_or(0.98 * t0);
    if headway_max >= t0 {
        anyhow::bail!(fuel::FuelError::HeadwayTooLarge {
            headway: headway_max,
            t0
        });
    }
    let model = cfg.fuel_cav;
    let mut rows = Vec::new();
    let mut h = 0.0;
    while h <= headway_max {
        rows.push((h, fuel::incremental_cost_analytic(h, d1, d2, v0, &model)?));
        h += args.step;
    }
    let optimal = fuel::optimal_threshold_analytic(d1, d2, v0, &model, headway_max)?;
    println!("headway_s  v_f_mps   d_f1_mL    d_f2_mL    d_tc_mL");
    for (h, c) in &rows {
        println!(
            "{:>8.2} {:>8.3} {:>9.3} {:>10.3} {:>10.3}",
            h, c.v_f, c.d_f1_ml, c.d_f2_ml, c.d_tc_ml
        );
    }
    println!("break-even threshold: {optimal:.4} s (d1={d1} m, d2={d2} m, v0={v0} m/s)");
    let path = write_out(&args.common.out, "analytic.csv", &output::analytic_csv(&rows, optimal))?;
    println!("-> {}", path.display());
    Ok(())
}
