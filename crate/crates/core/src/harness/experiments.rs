//! Multi-run experiments: SGD learning-rate grid, Alrao interval sweep and
//! frozen-feature curve.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::derive_seed;

use super::config::{OptimizerKind, TrainConfig};
use super::output::{emit_csv, fmt_f64, write_table};
use super::run::{prepare_data, train_on, PlainRates, RunLog, RunOptions, Splits};

/// Cell id of the SGD run at `lr`; shared by the grid and the sweep diagonal.
pub fn sgd_cell_id(lr: f64) -> String {
    format!("sgd-lr{lr:e}")
}

pub fn alrao_cell_id(eta_min: f64, eta_max: f64) -> String {
    format!("alrao-{eta_min:e}-{eta_max:e}")
}

fn sgd_config(cfg: &TrainConfig, lr: f64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr,
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub cells: Vec<(f64, RunLog)>,
    /// Index into `cells` of the lowest validation loss, `None` if every run failed.
    pub best: Option<usize>,
}

impl GridResult {
    pub fn best_lr(&self) -> Option<f64> {
        self.best.map(|i| self.cells[i].0)
    }

    pub fn best_run(&self) -> Option<&RunLog> {
        self.best.map(|i| &self.cells[i].1)
    }

    pub fn all_failed(&self) -> bool {
        self.best.is_none()
    }
}

/// One grid cell. Running it alone reproduces its in-grid result.
pub fn run_grid_cell(cfg: &TrainConfig, data: &Splits, lr: f64) -> Result<RunLog> {
    let id = sgd_cell_id(lr);
    let opts = RunOptions {
        seed: derive_seed(cfg.seed, &id),
        ..RunOptions::from_config(cfg)
    };
    train_on(&sgd_config(cfg, lr), data, &id, opts)
}

/// Plain SGD at every rate in `lrs` on shared splits; best by validation loss.
pub fn run_grid(cfg: &TrainConfig, lrs: &[f64]) -> Result<GridResult> {
    if lrs.is_empty() {
        return Err(Error::InvalidArgument("empty learning-rate grid".into()));
    }
    let data = prepare_data(cfg)?;
    run_grid_on(cfg, &data, lrs)
}

pub fn run_grid_on(cfg: &TrainConfig, data: &Splits, lrs: &[f64]) -> Result<GridResult> {
    let cells = lrs
        .iter()
        .map(|&lr| Ok((lr, run_grid_cell(cfg, data, lr)?)))
        .collect::<Result<Vec<_>>>()?;
    let best = cells
        .iter()
        .enumerate()
        .filter(|(_, (_, log))| log.selection_loss().is_finite())
        .min_by(|a, b| a.1 .1.selection_loss().total_cmp(&b.1 .1.selection_loss()))
        .map(|(i, _)| i);
    Ok(GridResult { cells, best })
}

pub fn emit_grid(res: &GridResult, out_dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for (lr, log) in &res.cells {
        emit_csv(log, &out_dir.join(&log.run_id))?;
        rows.push(vec![
            fmt_f64(*lr),
            status_str(log),
            log.best_epoch.map_or(String::new(), |e| e.to_string()),
            fmt_f64(log.selection_loss()),
            log.test.map_or(String::new(), |m| fmt_f64(m.loss)),
            log.test.map_or(String::new(), |m| fmt_f64(m.top1)),
        ]);
    }
    write_table(
        &out_dir.join("grid.csv"),
        &[
            "lr",
            "status",
            "best_epoch",
            "val_loss",
            "test_loss",
            "test_top1",
        ],
        &rows,
    )
}

fn status_str(log: &RunLog) -> String {
    match log.status {
        super::run::RunStatus::Completed => "completed".into(),
        super::run::RunStatus::Failed { epoch } => format!("failed@{epoch}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub eta_min: f64,
    pub eta_max: f64,
    pub log: RunLog,
}

impl SweepCell {
    pub fn is_sgd(&self) -> bool {
        self.eta_min == self.eta_max
    }

    /// Final validation loss; `inf` for failed runs.
    pub fn loss(&self) -> f64 {
        match (self.log.failed(), self.log.final_val) {
            (false, Some(m)) => m.loss,
            _ => f64::INFINITY,
        }
    }
}

/// SGD cell on the diagonal at `lr`, fixed budget.
pub fn sweep_sgd_cell(cfg: &TrainConfig, data: &Splits, lr: f64) -> Result<SweepCell> {
    let id = sgd_cell_id(lr);
    let opts = RunOptions {
        seed: derive_seed(cfg.seed, &id),
        epochs: cfg.sweep_sgd_epochs,
        patience: None,
        rates: PlainRates::Uniform,
    };
    Ok(SweepCell {
        eta_min: lr,
        eta_max: lr,
        log: train_on(&sgd_config(cfg, lr), data, &id, opts)?,
    })
}

/// Alrao cell above the diagonal, fixed budget.
pub fn sweep_alrao_cell(
    cfg: &TrainConfig,
    data: &Splits,
    eta_min: f64,
    eta_max: f64,
) -> Result<SweepCell> {
    let id = alrao_cell_id(eta_min, eta_max);
    let c = TrainConfig {
        optimizer: if cfg.optimizer == OptimizerKind::AlraoAdam {
            OptimizerKind::AlraoAdam
        } else {
            OptimizerKind::Alrao
        },
        eta_min,
        eta_max,
        ..cfg.clone()
    };
    let opts = RunOptions {
        seed: derive_seed(cfg.seed, &id),
        epochs: cfg.sweep_alrao_epochs,
        patience: None,
        rates: PlainRates::Uniform,
    };
    Ok(SweepCell {
        eta_min,
        eta_max,
        log: train_on(&c, data, &id, opts)?,
    })
}

/// Every pair `eta_min <= eta_max` from a sorted grid.
pub fn run_interval_sweep(cfg: &TrainConfig, grid: &[f64]) -> Result<Vec<SweepCell>> {
    let data = prepare_data(cfg)?;
    run_interval_sweep_on(cfg, &data, grid)
}

pub fn run_interval_sweep_on(
    cfg: &TrainConfig,
    data: &Splits,
    grid: &[f64],
) -> Result<Vec<SweepCell>> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "sweep grid must be nonempty and increasing: {grid:?}"
        )));
    }
    let mut cells = Vec::new();
    for (i, &lo) in grid.iter().enumerate() {
        for &hi in &grid[i..] {
            cells.push(if lo == hi {
                sweep_sgd_cell(cfg, data, lo)?
            } else {
                sweep_alrao_cell(cfg, data, lo, hi)?
            });
            log::info!("sweep cell [{lo:e}, {hi:e}] done");
        }
    }
    Ok(cells)
}

/// Long table `sweep.csv` plus `sweep_matrix.csv` (rows eta_min, columns
/// eta_max, blank below the diagonal).
pub fn emit_sweep(cells: &[SweepCell], grid: &[f64], out_dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for c in cells {
        emit_csv(&c.log, &out_dir.join(&c.log.run_id))?;
        rows.push(vec![
            fmt_f64(c.eta_min),
            fmt_f64(c.eta_max),
            if c.is_sgd() { "sgd" } else { "alrao" }.into(),
            status_str(&c.log),
            c.log.epochs_run.to_string(),
            fmt_f64(c.loss()),
            c.log.final_val.map_or(String::new(), |m| fmt_f64(m.top1)),
        ]);
    }
    write_table(
        &out_dir.join("sweep.csv"),
        &[
            "eta_min",
            "eta_max",
            "kind",
            "status",
            "epochs",
            "final_val_loss",
            "final_val_top1",
        ],
        &rows,
    )?;
    let mut header = vec!["eta_min".to_string()];
    header.extend(grid.iter().map(|&g| fmt_f64(g)));
    let matrix: Vec<Vec<String>> = grid
        .iter()
        .map(|&lo| {
            let mut r = vec![fmt_f64(lo)];
            r.extend(grid.iter().map(|&hi| {
                cells
                    .iter()
                    .find(|c| c.eta_min == lo && c.eta_max == hi)
                    .map_or(String::new(), |c| fmt_f64(c.loss()))
            }));
            r
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(&out_dir.join("sweep_matrix.csv"), &h, &matrix)
}

/// Plain SGD at `cfg.lr` training only a random fraction `p` of the features.
///
/// Every `p` uses the run seed, so all points share initialization and
/// minibatch order and `p = 1` is the ordinary SGD run.
pub fn run_frozen(cfg: &TrainConfig, ps: &[f64]) -> Result<Vec<(f64, RunLog)>> {
    let data = prepare_data(cfg)?;
    run_frozen_on(cfg, &data, ps)
}

pub fn run_frozen_on(cfg: &TrainConfig, data: &Splits, ps: &[f64]) -> Result<Vec<(f64, RunLog)>> {
    let c = sgd_config(cfg, cfg.lr);
    c.validate()?;
    ps.iter()
        .map(|&p| {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "probability {p} outside [0, 1]"
                )));
            }
            let opts = RunOptions {
                rates: PlainRates::Frozen(p),
                ..RunOptions::from_config(cfg)
            };
            Ok((p, train_on(&c, data, &format!("frozen-p{p}"), opts)?))
        })
        .collect()
}

pub fn emit_frozen(runs: &[(f64, RunLog)], out_dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for (p, log) in runs {
        emit_csv(log, &out_dir.join(&log.run_id))?;
        rows.push(vec![
            fmt_f64(*p),
            status_str(log),
            log.best_epoch.map_or(String::new(), |e| e.to_string()),
            log.test.map_or(String::new(), |m| fmt_f64(m.loss)),
            log.test.map_or(String::new(), |m| fmt_f64(m.top1)),
        ]);
    }
    write_table(
        &out_dir.join("frozen.csv"),
        &["p", "status", "best_epoch", "test_loss", "test_top1"],
        &rows,
    )
}
