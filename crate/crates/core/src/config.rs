//! Scenario configuration: TOML files, dotted-path overrides, validation.
//!
//! A scenario file has sections mirroring the simulation layers:
//!
//! ```toml
//! [network]            # corridor geometry, one [[network.junction]] each
//! [demand]             # O-D CSV path (relative to the file) or scripted arrivals
//! [fleet]              # cav_ratio / background_ratio
//! [dynamics]           # longitudinal control parameters
//! [fuel]               # polynomial coefficients, eta, theta
//! [sim]                # dt, duration, seed
//! ```
//!
//! Overrides use dotted paths (`junction.3.threshold_s=10`,
//! `fleet.cav_ratio=0.2`, `network.d2_tail_m=5000`) and apply to the raw
//! description before validation, so sweeps can stamp out variants cheaply.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{self, ArrivalSchedule, FleetMix, ODMatrix, VehicleClass};
use crate::dynamics::DynamicsParams;
use crate::engine::{DemandSource, ScenarioConfig};
use crate::fuel::FuelModel;
use crate::network::{self, CorridorSpec, NodeId};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error(transparent)]
    Network(#[from] network::NetworkError),
    #[error(transparent)]
    Demand(#[from] demand::DemandError),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("unknown or malformed override '{0}'")]
    UnknownOverride(String),
}

/// Raw (pre-validation) scenario description, 1:1 with the TOML layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawConfig {
    pub network: CorridorSpec,
    #[serde(default)]
    pub demand: RawDemand,
    #[serde(default)]
    pub fleet: RawFleet,
    #[serde(default)]
    pub dynamics: RawDynamics,
    #[serde(default)]
    pub fuel: RawFuel,
    pub sim: RawSim,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RawDemand {
    /// Path to the O-D CSV, relative to the config file.
    pub od_csv: Option<String>,
    /// Scales every O-D flow.
    #[serde(default = "one")]
    pub scale: f64,
    /// Scripted arrivals, used instead of the O-D matrix when present.
    #[serde(default, rename = "arrival")]
    pub arrivals: Vec<RawArrival>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawArrival {
    pub time_s: f64,
    pub origin: NodeId,
    pub destination: NodeId,
    pub class: VehicleClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawFleet {
    #[serde(default = "default_cav_ratio")]
    pub cav_ratio: f64,
    #[serde(default)]
    pub background_ratio: f64,
}

impl Default for RawFleet {
    fn default() -> Self {
        RawFleet {
            cav_ratio: default_cav_ratio(),
            background_ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RawDynamics {
    pub a_max_mps2: f64,
    pub a_min_mps2: f64,
    pub v0_cruise_mps: f64,
    pub v_cap_mps: f64,
    pub r1_m: f64,
    pub r2_m: f64,
    pub tau_s: f64,
    pub eps_gap_m: f64,
    pub gap_kp: f64,
    pub gap_kd: f64,
    pub chase_grace_m: f64,
    pub chain_margin_mps: f64,
    pub recovery_margin_mps: f64,
}

impl Default for RawDynamics {
    fn default() -> Self {
        let d = DynamicsParams::default();
        RawDynamics {
            a_max_mps2: d.a_max,
            a_min_mps2: d.a_min,
            v0_cruise_mps: d.v0_cruise,
            v_cap_mps: d.v_cap,
            r1_m: d.r1,
            r2_m: d.r2,
            tau_s: d.tau,
            eps_gap_m: d.eps_gap,
            gap_kp: d.gap_kp,
            gap_kd: d.gap_kd,
            chase_grace_m: d.chase_grace_m,
            chain_margin_mps: d.chain_margin_mps,
            recovery_margin_mps: d.recovery_margin_mps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RawFuel {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub eta: f64,
    pub theta_l_per_km: f64,
    /// Optional per-class coefficient overrides keyed by class name.
    pub class: BTreeMap<String, RawFuelOverride>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RawFuelOverride {
    pub c0: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
    pub c4: Option<f64>,
    pub c5: Option<f64>,
    pub eta: Option<f64>,
    pub theta_l_per_km: Option<f64>,
}

impl Default for RawFuel {
    fn default() -> Self {
        let m = FuelModel::reference();
        RawFuel {
            c0: m.c0,
            c1: m.c1,
            c2: m.c2,
            c3: m.c3,
            c4: m.c4,
            c5: m.c5,
            eta: m.eta,
            theta_l_per_km: m.theta,
            class: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawSim {
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    pub duration_s: f64,
    #[serde(default = "one_u64")]
    pub seed: u64,
    #[serde(default)]
    pub record_events: bool,
}

fn one() -> f64 {
    1.0
}
fn one_u64() -> u64 {
    1
}
fn default_dt() -> f64 {
    0.5
}
fn default_cav_ratio() -> f64 {
    0.1
}

impl RawFuel {
    fn base_model(&self) -> FuelModel {
        FuelModel {
            c0: self.c0,
            c1: self.c1,
            c2: self.c2,
            c3: self.c3,
            c4: self.c4,
            c5: self.c5,
            eta: self.eta,
            theta: self.theta_l_per_km,
        }
    }

    fn model_for(&self, class_name: &str) -> FuelModel {
        let mut m = self.base_model();
        if let Some(o) = self.class.get(class_name) {
            if let Some(v) = o.c0 {
                m.c0 = v;
            }
            if let Some(v) = o.c1 {
                m.c1 = v;
            }
            if let Some(v) = o.c2 {
                m.c2 = v;
            }
            if let Some(v) = o.c3 {
                m.c3 = v;
            }
            if let Some(v) = o.c4 {
                m.c4 = v;
            }
            if let Some(v) = o.c5 {
                m.c5 = v;
            }
            if let Some(v) = o.eta {
                m.eta = v;
            }
            if let Some(v) = o.theta_l_per_km {
                m.theta = v;
            }
        }
        m
    }
}

/// Parses a scenario file without building it.
pub fn load_raw(path: &Path) -> Result<RawConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Loads, validates and assembles a scenario. `base_dir` resolves the O-D
/// CSV path; for `from_file` it is the config file's directory.
pub fn build(raw: &RawConfig, base_dir: &Path) -> Result<ScenarioConfig, ConfigError> {
    let corridor = network::build_corridor(&raw.network)?;

    let fleet = FleetMix {
        cav_ratio: raw.fleet.cav_ratio,
        background_ratio: raw.fleet.background_ratio,
    };
    fleet.validate().map_err(ConfigError::Validation)?;

    let dynamics = DynamicsParams {
        a_max: raw.dynamics.a_max_mps2,
        a_min: raw.dynamics.a_min_mps2,
        v0_cruise: raw.dynamics.v0_cruise_mps,
        v_cap: raw.dynamics.v_cap_mps,
        r1: raw.dynamics.r1_m,
        r2: raw.dynamics.r2_m,
        tau: raw.dynamics.tau_s,
        eps_gap: raw.dynamics.eps_gap_m,
        gap_kp: raw.dynamics.gap_kp,
        gap_kd: raw.dynamics.gap_kd,
        chase_grace_m: raw.dynamics.chase_grace_m,
        chain_margin_mps: raw.dynamics.chain_margin_mps,
        recovery_margin_mps: raw.dynamics.recovery_margin_mps,
    };
    dynamics.validate().map_err(ConfigError::Validation)?;

    let fuel_cav = raw.fuel.model_for("cav");
    let fuel_background = raw.fuel.model_for("background");
    fuel_cav
        .validate()
        .map_err(|e| ConfigError::Validation(e.to_string()))?;
    fuel_background
        .validate()
        .map_err(|e| ConfigError::Validation(e.to_string()))?;

    if raw.sim.dt_s <= 0.0 {
        return Err(ConfigError::Validation(format!(
            "sim.dt_s must be positive, got {}",
            raw.sim.dt_s
        )));
    }
    if raw.sim.duration_s < raw.sim.dt_s {
        return Err(ConfigError::Validation(format!(
            "sim.duration_s ({}) must be at least one step ({})",
            raw.sim.duration_s, raw.sim.dt_s
        )));
    }
    if raw.sim.dt_s > dynamics.tau {
        return Err(ConfigError::Validation(format!(
            "sim.dt_s ({}) must not exceed dynamics.tau_s ({}); the safety bound assumes \
             reactions at least once per reaction time",
            raw.sim.dt_s, dynamics.tau
        )));
    }
    if raw.demand.scale < 0.0 {
        return Err(ConfigError::Validation(format!(
            "demand.scale must be >= 0, got {}",
            raw.demand.scale
        )));
    }

    let demand_source = if !raw.demand.arrivals.is_empty() {
        // Scripted arrivals carry explicit classes; fleet ratios do not apply.
        let mut entries = Vec::with_capacity(raw.demand.arrivals.len());
        for a in &raw.demand.arrivals {
            corridor.route(a.origin, a.destination)?;
            if a.time_s < 0.0 {
                return Err(ConfigError::Validation(format!(
                    "scripted arrival at negative time {}",
                    a.time_s
                )));
            }
            entries.push((a.time_s, a.origin, a.destination, a.class));
        }
        DemandSource::Scripted(ArrivalSchedule::from_list(entries))
    } else if let Some(rel) = &raw.demand.od_csv {
        let od_path = base_dir.join(rel);
        let text = std::fs::read_to_string(&od_path).map_err(|source| ConfigError::Io {
            path: od_path.clone(),
            source,
        })?;
        let od = demand::load_od_matrix(&text)?.scaled(raw.demand.scale);
        for (origin, destination) in od.od_pairs() {
            corridor.route(origin, destination)?;
        }
        DemandSource::Matrix(od)
    } else {
        DemandSource::Matrix(ODMatrix::empty())
    };

    Ok(ScenarioConfig {
        corridor,
        demand: demand_source,
        fleet,
        dynamics,
        fuel_cav,
        fuel_background,
        dt: raw.sim.dt_s,
        duration: raw.sim.duration_s,
        seed: raw.sim.seed,
        record_events: raw.sim.record_events,
    })
}

/// Loads and builds a scenario from a TOML file.
pub fn from_file(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let raw = load_raw(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    build(&raw, base)
}

/// Applies one dotted-path override to a raw config.
///
/// Supported keys:
///
/// * `junction.<id>.<threshold_s|d1_m|ramp_length_m>` — one junction
/// * `junction.all.<threshold_s|d1_m>` — every junction
/// * `network.mainline_length_m`
/// * `network.d2_tail_m` — corridor end placed this far past the last junction
/// * `fleet.<cav_ratio|background_ratio>`
/// * `demand.scale`
/// * `dynamics.<field>` — any `RawDynamics` field name
/// * `fuel.<c0..c5|eta|theta_l_per_km>`
/// * `sim.<dt_s|duration_s|seed>`
pub fn apply_override(raw: &mut RawConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::UnknownOverride(format!("{key}={value}"));
    let f = || value.parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = key.split('.').collect();
    match parts.as_slice() {
        ["junction", which, field] => {
            let apply = |j: &mut crate::network::JunctionSpec| -> Result<(), ConfigError> {
                match *field {
                    "threshold_s" => j.threshold_s = f()?,
                    "d1_m" => j.d1_m = f()?,
                    "ramp_length_m" => j.ramp_length_m = f()?,
                    _ => return Err(bad()),
                }
                Ok(())
            };
            if *which == "all" {
                for j in &mut raw.network.junctions {
                    apply(j)?;
                }
            } else {
                let id: NodeId = which.parse().map_err(|_| bad())?;
                let j = raw
                    .network
                    .junctions
                    .iter_mut()
                    .find(|j| j.id == id)
                    .ok_or_else(bad)?;
                apply(j)?;
            }
        }
        ["network", "mainline_length_m"] => raw.network.mainline_length_m = f()?,
        ["network", "d2_tail_m"] => {
            let last = raw
                .network
                .junctions
                .last()
                .ok_or_else(bad)?
                .position_m;
            raw.network.mainline_length_m = last + f()?;
        }
        ["fleet", "cav_ratio"] => raw.fleet.cav_ratio = f()?,
        ["fleet", "background_ratio"] => raw.fleet.background_ratio = f()?,
        ["demand", "scale"] => raw.demand.scale = f()?,
        ["dynamics", field] => match *field {
            "a_max_mps2" => raw.dynamics.a_max_mps2 = f()?,
            "a_min_mps2" => raw.dynamics.a_min_mps2 = f()?,
            "v0_cruise_mps" => raw.dynamics.v0_cruise_mps = f()?,
            "v_cap_mps" => raw.dynamics.v_cap_mps = f()?,
            "r1_m" => raw.dynamics.r1_m = f()?,
            "r2_m" => raw.dynamics.r2_m = f()?,
            "tau_s" => raw.dynamics.tau_s = f()?,
            "eps_gap_m" => raw.dynamics.eps_gap_m = f()?,
            "gap_kp" => raw.dynamics.gap_kp = f()?,
            "gap_kd" => raw.dynamics.gap_kd = f()?,
            "chase_grace_m" => raw.dynamics.chase_grace_m = f()?,
            "chain_margin_mps" => raw.dynamics.chain_margin_mps = f()?,
            "recovery_margin_mps" => raw.dynamics.recovery_margin_mps = f()?,
            _ => return Err(bad()),
        },
        ["fuel", field] => match *field {
            "c0" => raw.fuel.c0 = f()?,
            "c1" => raw.fuel.c1 = f()?,
            "c2" => raw.fuel.c2 = f()?,
            "c3" => raw.fuel.c3 = f()?,
            "c4" => raw.fuel.c4 = f()?,
            "c5" => raw.fuel.c5 = f()?,
            "eta" => raw.fuel.eta = f()?,
            "theta_l_per_km" => raw.fuel.theta_l_per_km = f()?,
            _ => return Err(bad()),
        },
        ["sim", "dt_s"] => raw.sim.dt_s = f()?,
        ["sim", "duration_s"] => raw.sim.duration_s = f()?,
        ["sim", "seed"] => raw.sim.seed = value.parse().map_err(|_| bad())?,
        _ => return Err(bad()),
    }
    Ok(())
}

/// Parses `KEY=VALUE` and applies it.
pub fn apply_override_expr(raw: &mut RawConfig, expr: &str) -> Result<(), ConfigError> {
    let (key, value) = expr
        .split_once('=')
        .ok_or_else(|| ConfigError::UnknownOverride(expr.to_string()))?;
    apply_override(raw, key.trim(), value.trim())
}

impl ODMatrix {
    /// Matrix with no periods and no flows: an empty demand scenario.
    pub fn empty() -> ODMatrix {
        demand::load_od_matrix("period_start_s,period_end_s,origin,destination,flow_vph\n")
            .expect("header-only matrix is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
[network]
mainline_length_m = 6000.0
origin_node = 1
end_node = 3

[[network.junction]]
id = 2
position_m = 2000.0
on_ramp = true
off_ramp = true
ramp_length_m = 1200.0
d1_m = 1000.0
threshold_s = 20.0

[sim]
duration_s = 100.0
"#
        .to_string()
    }

    #[test]
    fn parses_minimal_scenario_with_defaults() {
        let raw: RawConfig = toml::from_str(&minimal_toml()).unwrap();
        assert_eq!(raw.sim.dt_s, 0.5);
        assert_eq!(raw.sim.seed, 1);
        assert_eq!(raw.fleet.cav_ratio, 0.1);
        assert_eq!(raw.fuel.eta, 0.1);
        let cfg = build(&raw, Path::new(".")).unwrap();
        assert_eq!(cfg.corridor.junctions().len(), 1);
        assert!(matches!(cfg.demand, DemandSource::Matrix(_)));
    }

    #[test]
    fn override_paths() {
        let mut raw: RawConfig = toml::from_str(&minimal_toml()).unwrap();
        apply_override_expr(&mut raw, "junction.2.threshold_s=10").unwrap();
        assert_eq!(raw.network.junctions[0].threshold_s, 10.0);
        apply_override_expr(&mut raw, "junction.all.d1_m=500").unwrap();
        assert_eq!(raw.network.junctions[0].d1_m, 500.0);
        apply_override_expr(&mut raw, "network.d2_tail_m=5000").unwrap();
        assert_eq!(raw.network.mainline_length_m, 7000.0);
        apply_override_expr(&mut raw, "fleet.cav_ratio=0.25").unwrap();
        assert_eq!(raw.fleet.cav_ratio, 0.25);
        apply_override_expr(&mut raw, "dynamics.v_cap_mps=30").unwrap();
        assert_eq!(raw.dynamics.v_cap_mps, 30.0);
        apply_override_expr(&mut raw, "sim.seed=99").unwrap();
        assert_eq!(raw.sim.seed, 99);
        assert!(apply_override_expr(&mut raw, "junction.9.threshold_s=1").is_err());
        assert!(apply_override_expr(&mut raw, "nonsense.path=1").is_err());
        assert!(apply_override_expr(&mut raw, "no_equals_sign").is_err());
    }

    #[test]
    fn validation_rejects_bad_dt() {
        let mut raw: RawConfig = toml::from_str(&minimal_toml()).unwrap();
        raw.sim.dt_s = 0.0;
        assert!(matches!(build(&raw, Path::new(".")), Err(ConfigError::Validation(_))));
        raw.sim.dt_s = 2.0; // exceeds tau = 1.0
        assert!(matches!(build(&raw, Path::new(".")), Err(ConfigError::Validation(_))));
    }

    #[test]
    fn scripted_arrivals_validate_routes() {
        let mut raw: RawConfig = toml::from_str(&minimal_toml()).unwrap();
        raw.demand.arrivals.push(RawArrival {
            time_s: 0.0,
            origin: 1,
            destination: 3,
            class: VehicleClass::Cav,
        });
        assert!(build(&raw, Path::new(".")).is_ok());
        raw.demand.arrivals.push(RawArrival {
            time_s: 5.0,
            origin: 3,
            destination: 1,
            class: VehicleClass::Cav,
        });
        assert!(build(&raw, Path::new(".")).is_err());
    }
}
