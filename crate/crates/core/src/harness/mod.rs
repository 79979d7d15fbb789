//! Experiment orchestration: synthetic scenarios, seeded trials, parameter
//! sweeps and result files.

pub mod config;
pub mod results;
pub mod run;
pub mod trajectory;

pub use config::{ExperimentConfig, FilterKind, Scenario, SCHEMA_VERSION};
pub use results::{emit_results, format_sig6, rows_from_csv, rows_to_csv, Format, ResultRow, CSV_HEADER};
pub use run::{run_filter, run_sweep, sweep_points, variants, OutputSpec, RunOutput, SweepPoint, Variant};
pub use trajectory::{generate_trajectory, split_seed, DataParams, TrajectoryRecord};
