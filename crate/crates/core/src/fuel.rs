//! Fuel accounting.
//!
//! Instantaneous burn is a polynomial in speed and acceleration,
//!
//! `f(v, a) = c0 + c1*v*a + c2*v*a^2 + c3*v + c4*v^2 + c5*v^3`  (mL/s),
//!
//! clamped at zero. Trailing platoon members save a fraction `eta` of their
//! instantaneous burn from reduced aerodynamic drag.
//!
//! The module also carries the closed-form incremental-cost oracle for one
//! coordinated catch-up: the extra fuel spent traversing the coordination
//! zone faster, against the drag savings accrued over the cruising distance
//! after the junction. The oracle deliberately keeps only the steady-speed
//! polynomial terms (`c3..c5`) in the zone traverse — the acceleration
//! transient is treated as negligible — which is what makes a closed form
//! and a bisection for the break-even threshold possible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::VehicleId;

#[derive(Debug, Error, PartialEq)]
pub enum FuelError {
    #[error("headway {headway} s is at or beyond the zone traverse time {t0} s")]
    HeadwayTooLarge { headway: f64, t0: f64 },
    #[error("invalid fuel model: {0}")]
    InvalidModel(String),
}

/// Polynomial fuel model plus platooning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuelModel {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    /// Fraction of fuel a trailing platoon member saves, in (0, 1).
    pub eta: f64,
    /// Nominal cruise fuel per distance, mL/m (numerically equal to L/km).
    pub theta: f64,
}

impl FuelModel {
    /// Hand-checkable reference coefficient set used across the test suite.
    pub fn reference() -> Self {
        FuelModel {
            c0: 0.1,
            c1: 0.0,
            c2: 0.0,
            c3: 0.01,
            c4: 0.001,
            c5: 0.0001,
            eta: 0.1,
            theta: 0.3,
        }
    }

    pub fn validate(&self) -> Result<(), FuelError> {
        for (name, c) in [
            ("c0", self.c0),
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("c4", self.c4),
            ("c5", self.c5),
        ] {
            if !c.is_finite() {
                return Err(FuelError::InvalidModel(format!("{name} must be finite")));
            }
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(FuelError::InvalidModel(format!(
                "eta must be in (0, 1), got {}",
                self.eta
            )));
        }
        if self.theta <= 0.0 || self.theta.is_nan() {
            return Err(FuelError::InvalidModel(format!(
                "theta must be positive, got {}",
                self.theta
            )));
        }
        Ok(())
    }

    /// Steady-speed part of the polynomial: `c3*v + c4*v^2 + c5*v^3`.
    pub fn cruise_rate(&self, v: f64) -> f64 {
        self.c3 * v + self.c4 * v * v + self.c5 * v * v * v
    }
}

impl Default for FuelModel {
    fn default() -> Self {
        FuelModel::reference()
    }
}

/// Instantaneous fuel rate in mL/s, clamped at zero.
pub fn fuel_rate(v: f64, a: f64, model: &FuelModel) -> f64 {
    let f = model.c0 + model.c1 * v * a + model.c2 * v * a * a + model.cruise_rate(v);
    f.max(0.0)
}

/// Drag-savings adjustment: trailing platoon members burn `(1 - eta)` of the
/// solo rate; leaders (and everyone else) burn the full rate.
pub fn platoon_adjusted_rate(rate: f64, is_trailing: bool, eta: f64) -> f64 {
    if is_trailing {
        rate * (1.0 - eta)
    } else {
        rate
    }
}

/// Which accounting bucket a step of travel falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FuelZone {
    /// Inside a coordination zone (within `d1` upstream of a junction).
    D1,
    /// Everywhere else on the route.
    Post,
}

/// Per-vehicle fuel ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuelAccumulator {
    pub vehicle: VehicleId,
    pub d1_zone_ml: f64,
    pub post_junction_ml: f64,
    pub total_ml: f64,
    pub time_in_platoon_s: f64,
}

impl FuelAccumulator {
    pub fn new(vehicle: VehicleId) -> Self {
        FuelAccumulator {
            vehicle,
            d1_zone_ml: 0.0,
            post_junction_ml: 0.0,
            total_ml: 0.0,
            time_in_platoon_s: 0.0,
        }
    }
}

/// Adds one step of burn to the matching zone bucket and the total.
pub fn integrate_step(
    acc: &mut FuelAccumulator,
    v: f64,
    a: f64,
    dt: f64,
    zone: FuelZone,
    is_trailing: bool,
    model: &FuelModel,
) {
    debug_assert!(dt >= 0.0);
    let burn = platoon_adjusted_rate(fuel_rate(v, a, model), is_trailing, model.eta) * dt;
    match zone {
        FuelZone::D1 => acc.d1_zone_ml += burn,
        FuelZone::Post => acc.post_junction_ml += burn,
    }
    acc.total_ml += burn;
}

/// Closed-form incremental cost of one coordinated catch-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementalCost {
    /// Follower target speed used for the zone traverse.
    pub v_f: f64,
    /// Extra fuel spent in the coordination zone, mL.
    pub d_f1_ml: f64,
    /// Drag savings over the cruising distance (negative), mL.
    pub d_f2_ml: f64,
    /// Net incremental cost, mL.
    pub d_tc_ml: f64,
}

/// Evaluates the incremental-cost model for a single follower:
///
/// * zone term: `s_f * (c3*Vf + c4*Vf^2 + c5*Vf^3) - s_0 * (c3*V0 + ...)`,
///   with `s_f = d1/Vf` and `s_0 = d1/v0` the traverse times;
/// * savings term: `-eta * theta * d2`.
pub fn incremental_cost_analytic(
    headway: f64,
    d1: f64,
    d2: f64,
    v0: f64,
    model: &FuelModel,
) -> Result<IncrementalCost, FuelError> {
    let t0 = d1 / v0;
    if !(0.0..t0).contains(&headway) {
        return Err(FuelError::HeadwayTooLarge { headway, t0 });
    }
    let v_f = d1 / (t0 - headway);
    let s_f = d1 / v_f;
    let s_0 = t0;
    let d_f1_ml = s_f * model.cruise_rate(v_f) - s_0 * model.cruise_rate(v0);
    let d_f2_ml = -model.eta * model.theta * d2;
    Ok(IncrementalCost {
        v_f,
        d_f1_ml,
        d_f2_ml,
        d_tc_ml: d_f1_ml + d_f2_ml,
    })
}

/// Largest headway in `[0, headway_max]` whose incremental cost is still
/// non-positive: the break-even platooning threshold for this geometry.
///
/// The zone term is strictly increasing in the headway for positive cruise
/// coefficients while the savings term is constant, so the cost has at most
/// one sign change and bisection applies.
pub fn optimal_threshold_analytic(
    d1: f64,
    d2: f64,
    v0: f64,
    model: &FuelModel,
    headway_max: f64,
) -> Result<f64, FuelError> {
    let cost = |h: f64| incremental_cost_analytic(h, d1, d2, v0, model).map(|c| c.d_tc_ml);
    if cost(headway_max)? <= 0.0 {
        return Ok(headway_max);
    }
    // cost(0) = -eta*theta*d2 <= 0, cost(headway_max) > 0: bisect the root.
    let mut lo = 0.0;
    let mut hi = headway_max;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cost(mid)? <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
