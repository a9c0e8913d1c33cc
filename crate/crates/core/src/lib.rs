//! Deterministic micro-simulation of coordinated vehicle platooning over a
//! highway corridor with a cascade of on/off-ramp junctions.
//!
//! The crate is organised around the control structure of the problem:
//!
//! * [`network`] — corridor topology (junction cascade, ramps, detectors).
//! * [`demand`] — time-sliced O-D matrix ingestion and Poisson arrival
//!   generation, split into coordinated (CAV) and background fleets.
//! * [`dynamics`] — lower-level longitudinal control: safe car-following,
//!   the two-stage catch-up/gap-regulation merge process.
//! * [`coordination`] — upper-level per-junction controllers: detector
//!   crossings, headway threshold rule, follower target speed.
//! * [`fuel`] — speed-polynomial fuel rate, platoon drag-savings adjustment,
//!   trajectory integration, and the closed-form incremental-cost oracle with
//!   optimal-threshold search.
//! * [`engine`] — the fixed-timestep simulation loop tying it all together.
//! * [`config`] — TOML scenario files, dotted-path overrides, validation.
//!
//! Every simulation run is a pure function of its configuration: identical
//! configs produce bit-identical results, across processes and across
//! worker-thread counts.

pub mod config;
pub mod coordination;
pub mod demand;
pub mod dynamics;
pub mod engine;
pub mod fuel;
pub mod network;

use serde::{Deserialize, Serialize};

/// Identifies a vehicle for the lifetime of one simulation run.
///
/// Ids are dense: the arrival schedule assigns `0..n` in time order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VehicleId(pub u64);

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
