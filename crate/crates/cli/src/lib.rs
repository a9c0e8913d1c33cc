//! Library half of the scenario runner: the experiment harness and the CSV
//! emitters, shared between the binary and the test suites.

pub mod harness;
pub mod output;

pub use harness::{grid_argmin, run_cell, run_grid, run_sweep, GridCell, GridSpec, SweepRow, SweepSpec, SweepVariable};
