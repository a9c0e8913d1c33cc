//! Plot-ready CSV emission. Every file starts with the schema marker
//! `# platoon-cascade v1`; field order is stable for golden-file tests.

use std::fmt::Write as _;

use platoon_cascade_core::engine::{SimResult, Summary};
use platoon_cascade_core::fuel::IncrementalCost;

use crate::harness::{GridCell, SweepRow};

pub const SCHEMA_HEADER: &str = "# platoon-cascade v1";

pub fn summary_csv(summary: &Summary) -> String {
    let mut s = String::new();
    writeln!(s, "{SCHEMA_HEADER}").unwrap();
    writeln!(
        s,
        "seed,dt_s,duration_s,vehicle_count,exited,in_network_at_end,fuel_total_mL,fuel_total_L,\
         fuel_d1_mL,fuel_post_mL,fuel_per_vehicle_mL,vmt_m,platoons_formed,max_platoon_size,\
         assignments,capped_assignments,mean_time_platooned_s"
    )
    .unwrap();
    writeln!(
        s,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        summary.seed,
        summary.dt_s,
        summary.duration_s,
        summary.vehicle_count,
        summary.exited,
        summary.in_network_at_end,
        summary.fuel_total_ml,
        summary.fuel_total_l,
        summary.fuel_d1_ml,
        summary.fuel_post_ml,
        summary.fuel_per_vehicle_ml,
        summary.vmt_m,
        summary.platoons_formed,
        summary.max_platoon_size,
        summary.assignments,
        summary.capped_assignments,
        summary.mean_time_platooned_s,
    )
    .unwrap();
    s
}

pub fn assignments_csv(result: &SimResult) -> String {
    let mut s = String::new();
    writeln!(s, "{SCHEMA_HEADER}").unwrap();
    writeln!(
        s,
        "decided_at_s,junction,leader_id,follower_id,headway_s,target_speed_mps,capped_flag"
    )
    .unwrap();
    for a in &result.assignments {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            a.decided_at_s, a.junction, a.leader, a.follower, a.headway_s, a.target_speed_mps, a.capped
        )
        .unwrap();
    }
    s
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{SCHEMA_HEADER}").unwrap();
    writeln!(
        s,
        "variable,value,seed,vehicle_count,exited,fuel_total_mL,fuel_per_vehicle_mL,fuel_d1_mL,\
         fuel_post_mL,platoons_formed,assignments,capped_assignments"
    )
    .unwrap();
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.variable,
            r.value,
            r.seed,
            r.summary.vehicle_count,
            r.summary.exited,
            r.summary.fuel_total_ml,
            r.summary.fuel_per_vehicle_ml,
            r.summary.fuel_d1_ml,
            r.summary.fuel_post_ml,
            r.summary.platoons_formed,
            r.summary.assignments,
            r.summary.capped_assignments,
        )
        .unwrap();
    }
    s
}

pub fn grid_csv(junction_a: u32, junction_b: u32, cells: &[GridCell]) -> String {
    let mut s = String::new();
    writeln!(s, "{SCHEMA_HEADER}").unwrap();
    writeln!(s, "# junction_a={junction_a} junction_b={junction_b}").unwrap();
    writeln!(s, "r_a,r_b,mean_fuel_mL").unwrap();
    for c in cells {
        writeln!(s, "{},{},{}", c.r_a, c.r_b, c.mean_fuel_ml).unwrap();
    }
    s
}

pub fn analytic_csv(rows: &[(f64, IncrementalCost)], optimal: f64) -> String {
    let mut s = String::new();
    writeln!(s, "{SCHEMA_HEADER}").unwrap();
    writeln!(s, "# optimal_threshold_s={optimal}").unwrap();
    writeln!(s, "headway_s,v_f_mps,d_f1_mL,d_f2_mL,d_tc_mL").unwrap();
    for (h, c) in rows {
        writeln!(s, "{},{},{},{},{}", h, c.v_f, c.d_f1_ml, c.d_f2_ml, c.d_tc_ml).unwrap();
    }
    s
}

pub fn event_log(result: &SimResult) -> String {
    let mut s = String::new();
    for e in &result.events {
        let junction = e.junction.map(|j| j.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{},{}", e.t, e.kind, e.vehicle, junction, e.payload).unwrap();
    }
    s
}
