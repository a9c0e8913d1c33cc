//! Upper-level per-junction coordination.
//!
//! Each junction has two detectors a distance `d1` before the merge point,
//! one on the mainline and one on the on-ramp. Every detector crossing of a
//! coordinated vehicle is paired against the immediately preceding crossing
//! at the same junction (from either branch). If the detector headway is
//! below the junction's threshold, the later vehicle is instructed to catch
//! up at a target speed chosen so both vehicles reach the junction together.
//!
//! Controllers are open loop: a target speed is computed once from the two
//! detector times and never revised inside the zone. Background vehicles are
//! invisible to the controllers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::VehicleClass;
use crate::dynamics::DynamicsParams;
use crate::network::{Branch, Junction, NodeId, Route};
use crate::VehicleId;

#[derive(Debug, Error, PartialEq)]
pub enum CoordinationError {
    #[error("follower detected {headway} s before its leader; detections must be ordered")]
    NegativeHeadway { headway: f64 },
}

/// One detector crossing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRecord {
    pub junction: NodeId,
    pub branch: Branch,
    pub vehicle: VehicleId,
    pub class: VehicleClass,
    pub t_detect: f64,
    pub route: Route,
}

/// A leader/follower pairing decided at a junction.
///
/// `target_speed` is the uncapped value from the meet-at-the-junction
/// formula; the speed cap is applied by the lower control level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonAssignment {
    pub junction: NodeId,
    pub leader: VehicleId,
    pub follower: VehicleId,
    /// Detector headway `t_f - t_l`, seconds.
    pub headway: f64,
    pub target_speed: f64,
    /// Estimated junction arrival time shared by both vehicles.
    pub est_junction_arrival: f64,
    pub decided_at: f64,
}

/// Estimated junction arrival for a detector crossing: the crossing time
/// plus the zone traverse time `d1 / v0` at the nominal speed.
pub fn estimate_junction_arrival(rec: &DetectorRecord, d1: f64, v0: f64) -> f64 {
    rec.t_detect + d1 / v0
}

/// Threshold rule: pair iff the detector headway is strictly below `r`.
pub fn platoon_decision(
    leader: &DetectorRecord,
    follower: &DetectorRecord,
    threshold_r: f64,
) -> Result<bool, CoordinationError> {
    let headway = follower.t_detect - leader.t_detect;
    if headway < 0.0 {
        return Err(CoordinationError::NegativeHeadway { headway });
    }
    Ok(headway < threshold_r)
}

/// Follower target speed so that it covers `d1` in the leader's remaining
/// traverse time: `d1 / (d1/v0 - headway)`.
///
/// Returns `None` when the headway is at or beyond the zone traverse time
/// `d1/v0`: the leader is already past the junction when the follower is
/// detected, and the follower's behaviour is left unchanged.
pub fn target_speed(headway: f64, d1: f64, v0: f64) -> Option<f64> {
    debug_assert!(headway >= 0.0 && d1 > 0.0 && v0 > 0.0);
    let t0 = d1 / v0;
    if headway >= t0 {
        return None;
    }
    Some(d1 / (t0 - headway))
}

/// Per-junction controller: remembers the most recent coordinated detection
/// (the current platoon tail) and pairs each new detection against it.
#[derive(Debug, Clone, Default)]
pub struct JunctionController {
    last: Option<DetectorRecord>,
}

impl JunctionController {
    pub fn new() -> Self {
        Self::default()
    }

    /// Handles a detector crossing; returns an assignment when the pairing
    /// passes every gate:
    ///
    /// 1. both vehicles are coordinated (background crossings are ignored
    ///    entirely and do not become the tail),
    /// 2. headway strictly below the junction threshold,
    /// 3. the follower can still meet the leader (headway below `d1/v0`),
    /// 4. neither route exits at this junction's off-ramp.
    ///
    /// The new detection becomes the tail in every case, so chains pair each
    /// vehicle with its immediate predecessor.
    pub fn process_detection(
        &mut self,
        rec: DetectorRecord,
        junction: &Junction,
        params: &DynamicsParams,
    ) -> Option<PlatoonAssignment> {
        if rec.class != VehicleClass::Cav {
            return None;
        }
        let prev = self.last.replace(rec.clone());
        let prev = prev?;
        let decision = platoon_decision(&prev, &rec, junction.threshold_r).ok()?;
        if !decision {
            return None;
        }
        let headway = rec.t_detect - prev.t_detect;
        let target = target_speed(headway, junction.d1, params.v0_cruise)?;
        if prev.route.destination == junction.id || rec.route.destination == junction.id {
            return None;
        }
        Some(PlatoonAssignment {
            junction: junction.id,
            leader: prev.vehicle,
            follower: rec.vehicle,
            headway,
            target_speed: target,
            est_junction_arrival: estimate_junction_arrival(&prev, junction.d1, params.v0_cruise),
            decided_at: rec.t_detect,
        })
    }
}
