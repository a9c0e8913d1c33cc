//! Experiment harness: single runs with overrides, one-variable sweeps and
//! two-junction threshold grids.
//!
//! Every cell is an isolated engine run; cells are dispatched to a worker
//! pool and assembled in deterministic (value, seed) order regardless of
//! completion order, so output files are byte-stable across thread counts.

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use platoon_cascade_core::config::{self, RawConfig};
use platoon_cascade_core::engine::{self, ScenarioConfig, SimResult, Summary};
use platoon_cascade_core::network::NodeId;

/// What a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepVariable {
    ThresholdAll,
    ThresholdAt(NodeId),
    D1All,
    D2Tail,
    CavRatio,
    BackgroundRatio,
}

impl SweepVariable {
    pub fn override_key(&self) -> String {
        match self {
            SweepVariable::ThresholdAll => "junction.all.threshold_s".into(),
            SweepVariable::ThresholdAt(id) => format!("junction.{id}.threshold_s"),
            SweepVariable::D1All => "junction.all.d1_m".into(),
            SweepVariable::D2Tail => "network.d2_tail_m".into(),
            SweepVariable::CavRatio => "fleet.cav_ratio".into(),
            SweepVariable::BackgroundRatio => "fleet.background_ratio".into(),
        }
    }
}

impl FromStr for SweepVariable {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold_all" => Ok(SweepVariable::ThresholdAll),
            "d1_all" => Ok(SweepVariable::D1All),
            "d2_tail" => Ok(SweepVariable::D2Tail),
            "cav_ratio" => Ok(SweepVariable::CavRatio),
            "background_ratio" => Ok(SweepVariable::BackgroundRatio),
            other => {
                if let Some(id) = other.strip_prefix("threshold@") {
                    let id: NodeId = id
                        .parse()
                        .map_err(|_| anyhow!("bad junction id in sweep variable '{other}'"))?;
                    Ok(SweepVariable::ThresholdAt(id))
                } else {
                    bail!(
                        "unknown sweep variable '{other}' (expected threshold_all, \
                         threshold@<junction>, d1_all, d2_tail, cav_ratio, background_ratio)"
                    )
                }
            }
        }
    }
}

impl std::fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepVariable::ThresholdAll => write!(f, "threshold_all"),
            SweepVariable::ThresholdAt(id) => write!(f, "threshold@{id}"),
            SweepVariable::D1All => write!(f, "d1_all"),
            SweepVariable::D2Tail => write!(f, "d2_tail"),
            SweepVariable::CavRatio => write!(f, "cav_ratio"),
            SweepVariable::BackgroundRatio => write!(f, "background_ratio"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    pub replications: u32,
    pub seed_base: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            bail!("sweep needs at least one value");
        }
        if self.replications == 0 {
            bail!("sweep needs at least one replication");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub variable: SweepVariable,
    pub value: f64,
    pub seed: u64,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub r_a: f64,
    pub r_b: f64,
    pub mean_fuel_ml: f64,
}

/// Builds and runs one configuration variant.
pub fn run_cell(
    raw: &RawConfig,
    base_dir: &Path,
    overrides: &[(String, String)],
) -> Result<(ScenarioConfig, SimResult)> {
    let mut raw = raw.clone();
    for (key, value) in overrides {
        config::apply_override(&mut raw, key, value)?;
    }
    let cfg = config::build(&raw, base_dir)?;
    let result = engine::run(&cfg).with_context(|| "simulation failed")?;
    Ok((cfg, result))
}

/// One engine run per (value, seed), seeds paired across values.
pub fn run_sweep(raw: &RawConfig, base_dir: &Path, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut cells = Vec::new();
    for &value in &spec.values {
        for rep in 0..spec.replications {
            cells.push((value, spec.seed_base + rep as u64));
        }
    }
    let key = spec.variable.override_key();
    let mut rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(value, seed)| -> Result<SweepRow> {
            let overrides = vec![
                (key.clone(), value.to_string()),
                ("sim.seed".to_string(), seed.to_string()),
            ];
            let (cfg, result) = run_cell(raw, base_dir, &overrides)
                .with_context(|| format!("sweep cell {}={value} seed={seed}", spec.variable))?;
            Ok(SweepRow {
                variable: spec.variable,
                value,
                seed,
                summary: engine::summarize(&cfg, &result),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.seed.cmp(&b.seed)));
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub junction_a: NodeId,
    pub junction_b: NodeId,
    pub values_a: Vec<f64>,
    pub values_b: Vec<f64>,
    pub replications: u32,
    pub seed_base: u64,
}

/// Threshold heat map over two junctions; every other junction keeps the
/// threshold from the base configuration.
pub fn run_grid(raw: &RawConfig, base_dir: &Path, spec: &GridSpec) -> Result<Vec<GridCell>> {
    for id in [spec.junction_a, spec.junction_b] {
        if !raw.network.junctions.iter().any(|j| j.id == id) {
            bail!("unknown junction {id}");
        }
    }
    if spec.values_a.is_empty() || spec.values_b.is_empty() || spec.replications == 0 {
        bail!("grid needs values on both axes and at least one replication");
    }
    let mut cells = Vec::new();
    for &ra in &spec.values_a {
        for &rb in &spec.values_b {
            cells.push((ra, rb));
        }
    }
    let mut out: Vec<GridCell> = cells
        .par_iter()
        .map(|&(ra, rb)| -> Result<GridCell> {
            let mut fuel_sum = 0.0;
            for rep in 0..spec.replications {
                let overrides = vec![
                    (format!("junction.{}.threshold_s", spec.junction_a), ra.to_string()),
                    (format!("junction.{}.threshold_s", spec.junction_b), rb.to_string()),
                    ("sim.seed".to_string(), (spec.seed_base + rep as u64).to_string()),
                ];
                let (_, result) = run_cell(raw, base_dir, &overrides)
                    .with_context(|| format!("grid cell ({ra}, {rb}) rep {rep}"))?;
                fuel_sum += result.totals.fuel_total_ml;
            }
            Ok(GridCell {
                r_a: ra,
                r_b: rb,
                mean_fuel_ml: fuel_sum / spec.replications as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.r_a.total_cmp(&b.r_a).then(a.r_b.total_cmp(&b.r_b)));
    Ok(out)
}

/// Grid cell coordinates of the minimum mean fuel.
pub fn grid_argmin(cells: &[GridCell]) -> Option<&GridCell> {
    cells
        .iter()
        .min_by(|a, b| a.mean_fuel_ml.total_cmp(&b.mean_fuel_ml))
}
