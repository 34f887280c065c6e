use std::path::PathBuf;
use std::process::ExitCode;

use alrao::harness::{
    emit_convex, emit_csv, emit_frozen, emit_grid, emit_sweep, run_convex_check, run_frozen,
    run_grid, run_interval_sweep, run_train, DatasetSpec, OptimizerKind, RunStatus, TrainConfig,
    Verdict,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "alrao",
    version,
    about = "Train networks with per-feature random learning rates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One run with early stopping.
    Train(Overrides),
    /// Plain SGD over the learning-rate grid.
    Grid(Overrides),
    /// Alrao over every interval of the sweep grid, SGD on the diagonal.
    Sweep(Overrides),
    /// SGD training only a random fraction of the features.
    Frozen(Overrides),
    /// Convergence check on regularized logistic regression.
    ConvexCheck(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eta_min: Option<f64>,
    #[arg(long)]
    eta_max: Option<f64>,
    #[arg(long = "n-classifiers")]
    n_classifiers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// sgd, adam, alrao or alrao-adam
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// `blobs`, or `IMAGES,LABELS` paths of an IDX pair
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> alrao::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.eta_min {
            cfg.eta_min = v;
        }
        if let Some(v) = self.eta_max {
            cfg.eta_max = v;
        }
        if let Some(v) = self.n_classifiers {
            cfg.n_cl = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.optimizer {
            cfg.optimizer = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = match d.split_once(',') {
                None if d == "blobs" => match cfg.dataset {
                    b @ DatasetSpec::Blobs { .. } => b,
                    DatasetSpec::Idx { .. } => TrainConfig::default().dataset,
                },
                Some((images, labels)) => DatasetSpec::Idx {
                    images: images.into(),
                    labels: labels.into(),
                    downsample: matches!(
                        cfg.dataset,
                        DatasetSpec::Idx {
                            downsample: true,
                            ..
                        }
                    ),
                },
                None => {
                    return Err(alrao::Error::Config {
                        line: 0,
                        detail: format!("--dataset expects `blobs` or `IMAGES,LABELS`, got `{d}`"),
                    })
                }
            };
        }
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fmt_metric(m: Option<alrao::harness::Metrics>) -> String {
    m.map_or("-".into(), |m| {
        format!("loss {:.4}, top1 {:.4}", m.loss, m.top1)
    })
}

fn run(cli: Cli) -> alrao::Result<()> {
    match cli.command {
        Command::Train(o) => {
            let cfg = o.resolve()?;
            let log = run_train(&cfg)?;
            emit_csv(&log, &cfg.out_dir)?;
            match log.status {
                RunStatus::Completed => println!(
                    "completed {} epochs, best epoch {}, test {}",
                    log.epochs_run,
                    log.best_epoch.map_or("-".into(), |e| e.to_string()),
                    fmt_metric(log.test)
                ),
                RunStatus::Failed { epoch } => println!("diverged in epoch {epoch}"),
            }
        }
        Command::Grid(o) => {
            let cfg = o.resolve()?;
            let res = run_grid(&cfg, &cfg.grid)?;
            emit_grid(&res, &cfg.out_dir)?;
            for (lr, log) in &res.cells {
                println!(
                    "lr {lr:e}: val {:.4}, test {}",
                    log.selection_loss(),
                    fmt_metric(log.test)
                );
            }
            match res.best_lr() {
                Some(lr) => println!("best lr {lr:e}"),
                None => println!("all runs failed"),
            }
        }
        Command::Sweep(o) => {
            let cfg = o.resolve()?;
            let cells = run_interval_sweep(&cfg, &cfg.sweep_grid)?;
            emit_sweep(&cells, &cfg.sweep_grid, &cfg.out_dir)?;
            for c in &cells {
                println!(
                    "[{:e}, {:e}] final val loss {:.4}",
                    c.eta_min,
                    c.eta_max,
                    c.loss()
                );
            }
        }
        Command::Frozen(o) => {
            let cfg = o.resolve()?;
            let runs = run_frozen(&cfg, &cfg.frozen_ps)?;
            emit_frozen(&runs, &cfg.out_dir)?;
            for (p, log) in &runs {
                println!("p {p}: test {}", fmt_metric(log.test));
            }
        }
        Command::ConvexCheck(o) => {
            let cfg = o.resolve()?;
            let r = run_convex_check(&cfg)?;
            emit_convex(&r, &cfg.out_dir)?;
            println!(
                "{}: lambda {:.6}, L* {:.6}, alrao loss {}",
                r.verdict,
                r.lambda,
                r.l_star,
                r.alrao_loss.map_or("-".into(), |l| format!("{l:.6}"))
            );
            if r.verdict == Verdict::HypothesisUnmet {
                println!("no classifier rate below 1/lambda = {:.6}", 1.0 / r.lambda);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
