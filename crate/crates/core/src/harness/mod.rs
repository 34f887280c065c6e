//! Experiment orchestration: configuration, single runs with early stopping,
//! learning-rate grids, interval sweeps, frozen-feature curves, the convex
//! convergence check, and their CSV artifacts.

pub mod config;
pub mod convex;
pub mod experiments;
pub mod output;
pub mod run;

pub use config::{
    AveragingChoice, DatasetSpec, LayerSpec, OptimizerKind, TrainConfig, DEFAULT_LR_GRID,
};
pub use convex::{emit_convex, run_convex_check, ConvexReport, Verdict};
pub use experiments::{
    emit_frozen, emit_grid, emit_sweep, run_frozen, run_grid, run_grid_cell, run_interval_sweep,
    GridResult, SweepCell,
};
pub use output::{emit_csv, read_curves, read_posterior, read_run_dir, RunFiles};
pub use run::{
    prepare_data, run_train, train_on, CurveRow, Metrics, RunLog, RunOptions, RunStatus, Splits,
};
