//! Lower-level longitudinal control.
//!
//! Free driving and catch-up use a safe-speed car-following rule: the speed
//! chosen for the next step never exceeds the speed from which the follower
//! can avoid the leader even if the leader brakes at full strength forever.
//! Coordinated vehicles that are closing on or holding a platoon gap run a
//! proportional-derivative regulator toward the `r2` spacing, subordinate to
//! the same safety bound with the one-step reaction time of an automated
//! control loop instead of the human reaction time `tau`.

use serde::{Deserialize, Serialize};

use crate::coordination::PlatoonAssignment;
use crate::demand::VehicleClass;
use crate::network::Route;
use crate::VehicleId;



/// Extra clearance margin kept behind (near-)stopped leaders and stop
/// lines, m, on top of the one-step braking correction. Keeps the
/// safe-speed asymptote from grinding queued gaps to exact overlap.
pub const STANDING_MARGIN_M: f64 = 0.1;

/// Clearance held against a leader that may come to rest within one step.
///
/// The safe-speed rule credits the leader its continuous braking distance
/// `v^2/2b`; under the discrete update a slow leader can stop on the spot,
/// so the credit overshoots by up to `b*dt^2/2`. Queues must keep at least
/// that much slack.
pub fn standing_clearance(params: &DynamicsParams, dt: f64) -> f64 {
    0.5 * params.brake() * dt * dt + STANDING_MARGIN_M
}

/// Longitudinal control mode of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DriveMode {
    /// Uncoordinated cruising at the nominal speed.
    Free,
    /// Assigned a platoon leader, still outside the engagement radius `r1`;
    /// drives at the (capped) coordination target speed.
    CatchUp { leader: VehicleId, target_speed: f64 },
    /// Within `r1` of the leader: gap regulation pulls the gap toward `r2`.
    Closing { leader: VehicleId },
    /// Gap reached `r2`: holding formation behind the leader.
    Platooned { leader: VehicleId },
}

impl DriveMode {
    pub fn leader(&self) -> Option<VehicleId> {
        match *self {
            DriveMode::Free => None,
            DriveMode::CatchUp { leader, .. }
            | DriveMode::Closing { leader }
            | DriveMode::Platooned { leader } => Some(leader),
        }
    }

    pub fn is_platooned(&self) -> bool {
        matches!(self, DriveMode::Platooned { .. })
    }
}

/// Kinematic state of one vehicle on its current link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub class: VehicleClass,
    /// Coordinate on the current link, meters.
    pub position: f64,
    pub speed: f64,
    pub accel: f64,
    pub mode: DriveMode,
    pub route: Route,
    pub entered_at: f64,
}

/// Longitudinal control parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    /// Comfort acceleration bound, m/s².
    pub a_max: f64,
    /// Full braking (negative), m/s².
    pub a_min: f64,
    /// Nominal cruise speed, m/s.
    pub v0_cruise: f64,
    /// Catch-up speed cap, m/s. Applied to coordination targets only.
    pub v_cap: f64,
    /// Engagement radius for gap regulation, m.
    pub r1: f64,
    /// Platoon gap, m.
    pub r2: f64,
    /// Driver reaction / headway time for uncoordinated following, s.
    pub tau: f64,
    /// Tolerated band around `r2` once platooned, m.
    pub eps_gap: f64,
    /// Gap regulator proportional gain, 1/s².
    pub gap_kp: f64,
    /// Gap regulator derivative gain, 1/s.
    pub gap_kd: f64,
    /// A catch-up still outside `r1` this far past its junction is
    /// abandoned; bounds the chase after a missed meet.
    pub chase_grace_m: f64,
    /// Extra closing speed over an accelerating leader while still inside
    /// the coordination zone, m/s (chain tails need headroom to keep
    /// closing).
    pub chain_margin_mps: f64,
    /// Extra closing speed over the leader once the planned meet has failed
    /// (follower past the junction), m/s.
    pub recovery_margin_mps: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        DynamicsParams {
            a_max: 1.5,
            a_min: -4.5,
            v0_cruise: 20.0,
            v_cap: 17.88, // 40 mph
            r1: 100.0,
            r2: 10.0,
            tau: 1.0,
            eps_gap: 2.0,
            gap_kp: 0.1,
            gap_kd: 0.5,
            chase_grace_m: 2000.0,
            chain_margin_mps: 2.0,
            recovery_margin_mps: 5.0,
        }
    }
}

impl DynamicsParams {
    pub fn brake(&self) -> f64 {
        -self.a_min
    }

    /// Hard ceiling on any speed in the simulation.
    pub fn v_max_global(&self) -> f64 {
        self.v0_cruise.max(self.v_cap)
    }

    /// Reaction time backing the safety bound: human `tau` for free driving
    /// and catch-up, one control step for the automated gap regulator.
    pub fn reaction_for(&self, mode: &DriveMode, dt: f64) -> f64 {
        match mode {
            DriveMode::Free | DriveMode::CatchUp { .. } => self.tau,
            DriveMode::Closing { .. } | DriveMode::Platooned { .. } => dt,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.a_min < 0.0 && self.a_max > 0.0) {
            return Err(format!("need a_min < 0 < a_max, got [{}, {}]", self.a_min, self.a_max));
        }
        if self.r2 > self.r1 {
            return Err(format!("r2 ({}) must be <= r1 ({})", self.r2, self.r1));
        }
        if self.v0_cruise <= 0.0 {
            return Err(format!("v0_cruise must be positive, got {}", self.v0_cruise));
        }
        if self.v_cap < 0.0 {
            return Err(format!("v_cap must be >= 0, got {}", self.v_cap));
        }
        if self.tau <= 0.0 {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if self.eps_gap <= 0.0 || self.gap_kp < 0.0 || self.gap_kd < 0.0 {
            return Err("eps_gap must be positive, gains non-negative".into());
        }
        if self.chase_grace_m < 0.0 {
            return Err(format!("chase_grace_m must be >= 0, got {}", self.chase_grace_m));
        }
        Ok(())
    }
}

/// Largest speed the follower may hold for one step such that it can always
/// brake out of a collision, for any leader trajectory that itself brakes no
/// harder than `brake`:
///
/// `v_safe = -b*T + sqrt((b*T)^2 + v_leader^2 + 2*b*gap)`
pub fn safe_speed(gap: f64, leader_speed: f64, brake: f64, reaction: f64) -> f64 {
    let bt = brake * reaction;
    -bt + (bt * bt + leader_speed * leader_speed + 2.0 * brake * gap.max(0.0)).sqrt()
}

/// Capped coordination target speed for an assignment.
pub fn catchup_target(assignment: &PlatoonAssignment, params: &DynamicsParams) -> f64 {
    assignment.target_speed.min(params.v_cap)
}

/// Speed a coordinated follower is allowed to hold while chasing `leader`.
///
/// Inside the coordination zone the follower rides its plan, or slightly
/// above an accelerating leader (a chain tail needs headroom over its
/// leader to keep closing). Past the junction the planned meet has failed
/// and the follower may close at the recovery margin. Never above the cap.
pub fn chase_allowance(
    capped_target: f64,
    leader_speed: f64,
    past_junction: bool,
    params: &DynamicsParams,
) -> f64 {
    let base = if past_junction {
        capped_target.max(leader_speed + params.recovery_margin_mps)
    } else if leader_speed > capped_target {
        leader_speed + params.chain_margin_mps
    } else {
        capped_target
    };
    base.min(params.v_cap.max(capped_target))
}

/// Safe car-following acceleration toward the vehicle's mode target.
///
/// The desired speed is the minimum of the mode target, the safe speed
/// against the leader, and the global maximum; the commanded acceleration is
/// clipped to `[a_min, a_max]`. A non-positive gap commands full braking.
pub fn follow_step(
    veh: &VehicleState,
    leader: Option<&VehicleState>,
    params: &DynamicsParams,
    dt: f64,
) -> f64 {
    let target = match veh.mode {
        DriveMode::Free => params.v0_cruise,
        DriveMode::CatchUp { target_speed, .. } => target_speed,
        // Gap regulation owns the target; only the safety bound applies here.
        DriveMode::Closing { .. } | DriveMode::Platooned { .. } => params.v_max_global(),
    };
    let mut desired = target.min(params.v_max_global());
    if let Some(l) = leader {
        let mut gap = l.position - veh.position;
        if gap <= 0.0 {
            return params.a_min;
        }
        if l.speed < params.brake() * dt {
            gap = (gap - standing_clearance(params, dt)).max(0.0);
        }
        desired = desired.min(safe_speed(
            gap,
            l.speed,
            params.brake(),
            params.reaction_for(&veh.mode, dt),
        ));
    }
    ((desired - veh.speed) / dt).clamp(params.a_min, params.a_max)
}

/// Proportional-derivative regulation toward `gap = r2` at zero relative
/// speed, subordinate to the safety bound of `follow_step`.
pub fn platoon_gap_step(
    veh: &VehicleState,
    leader: &VehicleState,
    params: &DynamicsParams,
    dt: f64,
) -> f64 {
    let gap = leader.position - veh.position;
    let pd = params.gap_kp * (gap - params.r2) + params.gap_kd * (leader.speed - veh.speed);
    pd.min(follow_step(veh, Some(leader), params, dt))
        .clamp(params.a_min, params.a_max)
}

/// Resolves the next control mode from the current one, the active
/// assignment (leader plus allowed chase speed) and the gap to that leader.
///
/// Transitions run one way, `Free -> CatchUp -> Closing -> Platooned`, with
/// a drop back to `Free` when there is no live assignment (leader exited) or
/// the pairing geometry broke (leader no longer ahead). Entry skips forward:
/// an assignment granted already inside `r1` (or at the platoon gap) starts
/// in `Closing` (or `Platooned`) directly.
///
/// The platoon forms once the gap is inside the settled band
/// `r2 + eps_gap`: the regulator approaches `r2` from above without
/// overshooting, so an exact-`r2` trigger would never fire.
pub fn mode_transition(
    current: &DriveMode,
    assignment: Option<(VehicleId, f64)>,
    leader_gap: Option<f64>,
    params: &DynamicsParams,
) -> DriveMode {
    let Some((leader, target_speed)) = assignment else {
        return DriveMode::Free;
    };
    let Some(gap) = leader_gap else {
        return DriveMode::Free;
    };
    if gap <= 0.0 {
        return DriveMode::Free;
    }
    let same_leader = current.leader() == Some(leader);
    let formation_gap = params.r2 + params.eps_gap;
    match current {
        DriveMode::Platooned { .. } if same_leader => DriveMode::Platooned { leader },
        DriveMode::Closing { .. } if same_leader && gap > formation_gap => {
            DriveMode::Closing { leader }
        }
        _ => {
            if gap <= formation_gap {
                DriveMode::Platooned { leader }
            } else if gap < params.r1 {
                DriveMode::Closing { leader }
            } else {
                DriveMode::CatchUp { leader, target_speed }
            }
        }
    }
}
