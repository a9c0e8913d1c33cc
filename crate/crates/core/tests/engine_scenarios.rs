//! Integration scenarios exercising the full simulation loop against the
//! control-design invariants: determinism, conservation, safety, meeting at
//! the junction, arrival-time fidelity, platoon gap stability.

use std::path::{Path, PathBuf};

use platoon_cascade_core::config::{self, RawConfig};
use platoon_cascade_core::demand::VehicleClass;
use platoon_cascade_core::engine::{self, SimResult};
use platoon_cascade_core::VehicleId;

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> RawConfig {
    config::load_raw(&scenarios_dir().join(name)).unwrap()
}

fn run(raw: &RawConfig) -> SimResult {
    let cfg = config::build(raw, &scenarios_dir()).unwrap();
    engine::run(&cfg).unwrap()
}

#[test]
fn deterministic_replay_is_bit_exact() {
    let mut raw = load("single_junction.toml");
    raw.sim.duration_s = 1200.0;
    let a = run(&raw);
    let b = run(&raw);
    assert_eq!(a, b);
    // A different seed must actually change the outcome.
    config::apply_override(&mut raw, "sim.seed", "2").unwrap();
    let c = run(&raw);
    assert_ne!(a.totals.fuel_total_ml, c.totals.fuel_total_ml);
}

#[test]
fn conservation_holds_on_the_network_scenario() {
    let mut raw = load("i210.toml");
    raw.sim.duration_s = 2000.0;
    let r = run(&raw);
    assert!(r.injected > 100, "expected demand to materialize");
    assert_eq!(r.injected, r.exited + r.vehicles_in_network_at_end);
    let total: f64 = r.trips.iter().map(|t| t.fuel_total_ml).sum();
    assert!((total - r.totals.fuel_total_ml).abs() < 1e-6);
}

#[test]
fn zero_threshold_sweep_point_equals_baseline() {
    let mut raw = load("single_junction.toml");
    raw.sim.duration_s = 1500.0;
    config::apply_override(&mut raw, "junction.all.threshold_s", "0").unwrap();
    let a = run(&raw);
    let b = run(&raw);
    assert_eq!(a, b);
    assert_eq!(a.totals.assignments, 0);
    assert_eq!(a.totals.platoons_formed, 0);
}

/// Meeting property: a pair with headway below both the threshold and the
/// zone traverse time ends up at platoon spacing by the junction (within a
/// few steps of cruise travel). Uses the default control parameters rather
/// than the tight oracle calibration.
#[test]
fn coordinated_pair_meets_at_the_junction() {
    let mut raw = load("two_vehicle.toml");
    raw.sim.record_events = true;
    config::apply_override(&mut raw, "dynamics.r2_m", "10").unwrap();
    config::apply_override(&mut raw, "dynamics.eps_gap_m", "2").unwrap();
    config::apply_override(&mut raw, "sim.dt_s", "0.5").unwrap();
    for headway in [2.0, 5.0, 10.0, 20.0] {
        raw.demand.arrivals[1].time_s = headway;
        let cfg = config::build(&raw, &scenarios_dir()).unwrap();
        let r = engine::run(&cfg).unwrap();
        assert_eq!(r.assignments.len(), 1, "headway {headway}");
        let junction_pos = 3200.0;
        let v0 = cfg.dynamics.v0_cruise;
        let dt = cfg.dt;
        // Leader's junction crossing time from the event log.
        let cross = r
            .events
            .iter()
            .find(|e| e.kind == "cross" && e.vehicle == 0)
            .expect("leader crosses the junction");
        // Follower position at that time: reconstruct from its merge event
        // (the merge happens at the junction) and check the spacing bound.
        let merge = r
            .events
            .iter()
            .find(|e| e.kind == "merge" && e.vehicle == 1)
            .expect("follower merges");
        let gap_at_junction = (merge.t - cross.t) * v0;
        let bound = cfg.dynamics.r2 + v0 * dt * 5.0;
        assert!(
            gap_at_junction <= bound + junction_pos * 1e-9,
            "headway {headway}: gap at junction {gap_at_junction:.2} m exceeds {bound:.2} m"
        );
        let follower = r.trips.iter().find(|t| t.vehicle == VehicleId(1)).unwrap();
        assert!(follower.time_platooned_s > 0.0, "headway {headway}: never platooned");
    }
}

/// Arrival-time fidelity: without coordination and congestion, the actual
/// junction crossing matches the detector-based estimate.
#[test]
fn uncoordinated_arrival_matches_estimate() {
    let mut raw = load("two_vehicle.toml");
    raw.sim.record_events = true;
    config::apply_override(&mut raw, "junction.all.threshold_s", "0").unwrap();
    let cfg = config::build(&raw, &scenarios_dir()).unwrap();
    let r = engine::run(&cfg).unwrap();
    let d1 = 3000.0;
    let v0 = cfg.dynamics.v0_cruise;
    for vehicle in [0u64, 1] {
        let detect = r
            .events
            .iter()
            .find(|e| e.kind == "detect" && e.vehicle == vehicle)
            .unwrap();
        // Mainline vehicles log a junction crossing; ramp vehicles cross by
        // merging at the junction.
        let cross = r
            .events
            .iter()
            .find(|e| (e.kind == "cross" || e.kind == "merge") && e.vehicle == vehicle)
            .unwrap();
        let estimate = detect.t + d1 / v0;
        assert!(
            (cross.t - estimate).abs() <= 2.0,
            "vehicle {vehicle}: crossed {:.2}, estimated {:.2}",
            cross.t,
            estimate
        );
    }
}

/// Platoon stability: once formed (leader cruising, no exits), the gap stays
/// within the tolerance band for at least 95% of the remaining steps.
#[test]
fn platoon_gap_stays_in_band() {
    let mut raw = load("two_vehicle.toml");
    raw.demand.arrivals[1].time_s = 5.0;
    raw.sim.record_events = true;
    let cfg = config::build(&raw, &scenarios_dir()).unwrap();
    let r = engine::run(&cfg).unwrap();
    let follower = r.trips.iter().find(|t| t.vehicle == VehicleId(1)).unwrap();
    let formed_at = r
        .events
        .iter()
        .find(|e| e.kind == "platoon" && e.vehicle == 1)
        .expect("platoon forms")
        .t;
    let exit = follower.exited_at.unwrap();
    // time_platooned counts only same-link trailing steps; requiring >= 95%
    // of the post-formation window exercises the band indirectly: the mode
    // (and therefore the counter) only persists while the pairing holds.
    let window = exit - formed_at;
    assert!(
        follower.time_platooned_s >= 0.95 * window,
        "platooned {:.1}s of a {:.1}s window",
        follower.time_platooned_s,
        window
    );
}

#[test]
fn background_vehicles_are_simulated_but_never_coordinated() {
    let mut raw = load("single_junction.toml");
    raw.sim.duration_s = 1500.0;
    config::apply_override(&mut raw, "fleet.cav_ratio", "0").unwrap();
    config::apply_override(&mut raw, "fleet.background_ratio", "0.6").unwrap();
    let r = run(&raw);
    assert!(r.injected > 0);
    assert_eq!(r.totals.assignments, 0);
    assert!(r.trips.iter().all(|t| t.class == VehicleClass::Background));
    assert!(r.trips.iter().all(|t| t.time_platooned_s == 0.0));
}

#[test]
fn speed_stays_within_global_bounds_under_congestion() {
    let mut raw = load("background.toml");
    config::apply_override(&mut raw, "fleet.background_ratio", "0.9").unwrap();
    raw.sim.duration_s = 600.0;
    let cfg = config::build(&raw, &scenarios_dir()).unwrap();
    // run() asserts collisions, conservation and speed bounds every step.
    let r = engine::run(&cfg).unwrap();
    assert!(r.injected > 200, "congested scenario should inject plenty");
    assert!(r.never_injected > 0, "entries should saturate");
}

/// Halving dt changes total fuel by well under a percent on the reference
/// scenario.
#[test]
fn dt_robustness_on_reference_scenario() {
    let mut raw = load("single_junction.toml");
    raw.sim.duration_s = 2400.0;
    let coarse = run(&raw);
    config::apply_override(&mut raw, "sim.dt_s", "0.25").unwrap();
    let fine = run(&raw);
    let rel = (coarse.totals.fuel_total_ml - fine.totals.fuel_total_ml).abs()
        / fine.totals.fuel_total_ml;
    assert!(rel < 0.01, "dt halving moved total fuel by {:.3}%", rel * 100.0);
}
