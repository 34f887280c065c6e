//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::averaging::DEFAULT_THETA;
use crate::error::{Error, Result};
use crate::features::LrInterval;
use crate::nn::{Activation, Padding};

/// The seven-point learning-rate grid used for SGD baselines.
pub const DEFAULT_LR_GRID: [f64; 7] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Alrao,
    AlraoAdam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Alrao => "alrao",
            OptimizerKind::AlraoAdam => "alrao-adam",
        }
    }

    pub fn is_alrao(self) -> bool {
        matches!(self, OptimizerKind::Alrao | OptimizerKind::AlraoAdam)
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "alrao" => Ok(OptimizerKind::Alrao),
            "alrao-adam" => Ok(OptimizerKind::AlraoAdam),
            _ => Err(format!(
                "unknown optimizer `{s}` (sgd, adam, alrao, alrao-adam)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AveragingChoice {
    Switch,
    Bma,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// 2x2 average pooling after loading.
        downsample: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense(usize),
    Conv {
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    },
    BatchNorm,
    Act(Activation),
}

impl LayerSpec {
    fn parse(tok: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = tok.split(':').collect();
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| format!("bad size `{s}` in `{tok}`"))
        };
        match parts.as_slice() {
            ["dense", n] => Ok(LayerSpec::Dense(num(n)?)),
            ["conv", c, k] => Ok(LayerSpec::Conv {
                out_channels: num(c)?,
                kernel: num(k)?,
                padding: Padding::Valid,
            }),
            ["conv", c, k, p] => Ok(LayerSpec::Conv {
                out_channels: num(c)?,
                kernel: num(k)?,
                padding: match *p {
                    "valid" => Padding::Valid,
                    "same" => Padding::Same,
                    _ => return Err(format!("unknown padding `{p}`")),
                },
            }),
            ["batchnorm"] => Ok(LayerSpec::BatchNorm),
            ["tanh"] => Ok(LayerSpec::Act(Activation::Tanh)),
            ["relu"] => Ok(LayerSpec::Act(Activation::Relu)),
            ["sigmoid"] => Ok(LayerSpec::Act(Activation::Sigmoid)),
            _ => Err(format!("unknown layer `{tok}`")),
        }
    }

    fn render(self) -> String {
        match self {
            LayerSpec::Dense(n) => format!("dense:{n}"),
            LayerSpec::Conv {
                out_channels,
                kernel,
                padding,
            } => format!(
                "conv:{out_channels}:{kernel}:{}",
                if padding == Padding::Same {
                    "same"
                } else {
                    "valid"
                }
            ),
            LayerSpec::BatchNorm => "batchnorm".into(),
            LayerSpec::Act(Activation::Tanh) => "tanh".into(),
            LayerSpec::Act(Activation::Relu) => "relu".into(),
            LayerSpec::Act(Activation::Sigmoid) => "sigmoid".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub normalize: bool,
    /// Layers before the output layer; the output layer is added per run.
    pub model: Vec<LayerSpec>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub adam_lr: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub n_cl: usize,
    pub theta: f64,
    pub averaging: AveragingChoice,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub grid: Vec<f64>,
    pub sweep_grid: Vec<f64>,
    pub sweep_alrao_epochs: usize,
    pub sweep_sgd_epochs: usize,
    pub frozen_ps: Vec<f64>,
    pub convex_reg: f64,
    pub convex_tol: f64,
    pub convex_steps: usize,
    pub convex_oracle_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetSpec::Blobs {
                classes: 3,
                dim: 20,
                per_class: 2000,
                spread: 0.3,
            },
            split: [0.6, 0.2, 0.2],
            normalize: true,
            model: vec![
                LayerSpec::Dense(64),
                LayerSpec::Act(Activation::Tanh),
                LayerSpec::Dense(64),
                LayerSpec::Act(Activation::Tanh),
            ],
            optimizer: OptimizerKind::Alrao,
            lr: 0.1,
            adam_lr: crate::optim::ADAM_DEFAULT_LR,
            eta_min: 1e-5,
            eta_max: 10.0,
            n_cl: 10,
            theta: DEFAULT_THETA,
            averaging: AveragingChoice::Switch,
            batch_size: 32,
            max_epochs: 50,
            patience: 20,
            seed: 0,
            out_dir: PathBuf::from("out"),
            grid: DEFAULT_LR_GRID.to_vec(),
            sweep_grid: vec![1e-5, 10f64.powf(-3.5), 1e-2, 10f64.powf(-0.5), 10.0],
            sweep_alrao_epochs: 30,
            sweep_sgd_epochs: 50,
            frozen_ps: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            convex_reg: 1e-2,
            convex_tol: 1e-3,
            convex_steps: 3000,
            convex_oracle_steps: 20_000,
        }
    }
}

fn floats(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad number `{}`", s.trim()))
        })
        .collect()
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    /// Parse config text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        // Dataset keys may arrive in any order; collect before building.
        let mut kind = String::from("blobs");
        let (mut classes, mut dim, mut per_class, mut spread) = (3, 20, 2000, 0.3);
        let (mut images, mut labels, mut downsample) = (None, None, false);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Config {
                line: i + 1,
                detail,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            let uint = || {
                value
                    .parse::<usize>()
                    .map_err(|_| err(format!("{key}: bad integer `{value}`")))
            };
            let float = || {
                value
                    .parse::<f64>()
                    .map_err(|_| err(format!("{key}: bad number `{value}`")))
            };
            let path = || {
                let p = PathBuf::from(value);
                match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                }
            };
            match key {
                "dataset" => kind = value.to_string(),
                "blobs_classes" => classes = uint()?,
                "blobs_dim" => dim = uint()?,
                "blobs_per_class" => per_class = uint()?,
                "blobs_spread" => spread = float()?,
                "idx_images" => images = Some(path()),
                "idx_labels" => labels = Some(path()),
                "idx_downsample" => {
                    downsample = value
                        .parse()
                        .map_err(|_| err(format!("bad bool `{value}`")))?
                }
                "split" => {
                    let v = floats(value).map_err(err)?;
                    cfg.split = v
                        .try_into()
                        .map_err(|_| err("split needs three fractions".into()))?;
                }
                "normalize" => {
                    cfg.normalize = value
                        .parse()
                        .map_err(|_| err(format!("bad bool `{value}`")))?
                }
                "model" => {
                    cfg.model = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|t| LayerSpec::parse(t.trim()))
                            .collect::<std::result::Result<_, _>>()
                            .map_err(err)?
                    }
                }
                "optimizer" => cfg.optimizer = value.parse().map_err(err)?,
                "lr" => cfg.lr = float()?,
                "adam_lr" => cfg.adam_lr = float()?,
                "eta_min" => cfg.eta_min = float()?,
                "eta_max" => cfg.eta_max = float()?,
                "n_cl" => cfg.n_cl = uint()?,
                "theta" => cfg.theta = float()?,
                "averaging" => {
                    cfg.averaging = match value {
                        "switch" => AveragingChoice::Switch,
                        "bma" => AveragingChoice::Bma,
                        _ => return Err(err(format!("unknown averaging `{value}`"))),
                    }
                }
                "batch_size" => cfg.batch_size = uint()?,
                "max_epochs" => cfg.max_epochs = uint()?,
                "patience" => cfg.patience = uint()?,
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|_| err(format!("bad seed `{value}`")))?
                }
                "out_dir" => cfg.out_dir = path(),
                "grid" => cfg.grid = floats(value).map_err(err)?,
                "sweep_grid" => cfg.sweep_grid = floats(value).map_err(err)?,
                "sweep_alrao_epochs" => cfg.sweep_alrao_epochs = uint()?,
                "sweep_sgd_epochs" => cfg.sweep_sgd_epochs = uint()?,
                "frozen_ps" => cfg.frozen_ps = floats(value).map_err(err)?,
                "convex_reg" => cfg.convex_reg = float()?,
                "convex_tol" => cfg.convex_tol = float()?,
                "convex_steps" => cfg.convex_steps = uint()?,
                "convex_oracle_steps" => cfg.convex_oracle_steps = uint()?,
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }
        cfg.dataset = match kind.as_str() {
            "blobs" => DatasetSpec::Blobs {
                classes,
                dim,
                per_class,
                spread,
            },
            "idx" => DatasetSpec::Idx {
                images: images.ok_or_else(|| Error::Config {
                    line: 0,
                    detail: "idx dataset needs idx_images".into(),
                })?,
                labels: labels.ok_or_else(|| Error::Config {
                    line: 0,
                    detail: "idx dataset needs idx_labels".into(),
                })?,
                downsample,
            },
            other => {
                return Err(Error::Config {
                    line: 0,
                    detail: format!("unknown dataset `{other}` (blobs, idx)"),
                })
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::Config { line: 0, detail });
        if self.optimizer.is_alrao() {
            LrInterval::new(self.eta_min, self.eta_max).map_err(|e| Error::Config {
                line: 0,
                detail: e.to_string(),
            })?;
            if self.n_cl < 1 {
                return bad("n_cl must be at least 1".into());
            }
            if !(self.theta > 0.0 && self.theta <= 1.0) {
                return bad(format!("theta must be in (0, 1], got {}", self.theta));
            }
        }
        if self.optimizer == OptimizerKind::Sgd && !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("sgd needs lr > 0, got {}", self.lr));
        }
        if self.optimizer == OptimizerKind::Adam
            && !(self.adam_lr > 0.0 && self.adam_lr.is_finite())
        {
            return bad(format!("adam needs adam_lr > 0, got {}", self.adam_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "split fractions must sum to 1, got {:?}",
                self.split
            ));
        }
        if self.frozen_ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!(
                "frozen_ps must lie in [0, 1], got {:?}",
                self.frozen_ps
            ));
        }
        if self.sweep_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sweep_grid must be strictly increasing".into());
        }
        if let DatasetSpec::Blobs { classes, dim, .. } = self.dataset {
            if classes < 2 || dim < 1 {
                return bad(format!(
                    "blobs need at least 2 classes and 1 dimension, got {classes}, {dim}"
                ));
            }
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; `parse(echo())` gives back `self`.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        match &self.dataset {
            DatasetSpec::Blobs {
                classes,
                dim,
                per_class,
                spread,
            } => {
                let _ = writeln!(s, "dataset = blobs");
                let _ = writeln!(s, "blobs_classes = {classes}");
                let _ = writeln!(s, "blobs_dim = {dim}");
                let _ = writeln!(s, "blobs_per_class = {per_class}");
                let _ = writeln!(s, "blobs_spread = {spread:?}");
            }
            DatasetSpec::Idx {
                images,
                labels,
                downsample,
            } => {
                let _ = writeln!(s, "dataset = idx");
                let _ = writeln!(s, "idx_images = {}", images.display());
                let _ = writeln!(s, "idx_labels = {}", labels.display());
                let _ = writeln!(s, "idx_downsample = {downsample}");
            }
        }
        let model: Vec<String> = self.model.iter().map(|l| l.render()).collect();
        let _ = writeln!(s, "split = {}", join(&self.split));
        let _ = writeln!(s, "normalize = {}", self.normalize);
        let _ = writeln!(s, "model = {}", model.join(","));
        let _ = writeln!(s, "optimizer = {}", self.optimizer.name());
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "adam_lr = {:?}", self.adam_lr);
        let _ = writeln!(s, "eta_min = {:?}", self.eta_min);
        let _ = writeln!(s, "eta_max = {:?}", self.eta_max);
        let _ = writeln!(s, "n_cl = {}", self.n_cl);
        let _ = writeln!(s, "theta = {:?}", self.theta);
        let _ = writeln!(
            s,
            "averaging = {}",
            if self.averaging == AveragingChoice::Bma {
                "bma"
            } else {
                "switch"
            }
        );
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "grid = {}", join(&self.grid));
        let _ = writeln!(s, "sweep_grid = {}", join(&self.sweep_grid));
        let _ = writeln!(s, "sweep_alrao_epochs = {}", self.sweep_alrao_epochs);
        let _ = writeln!(s, "sweep_sgd_epochs = {}", self.sweep_sgd_epochs);
        let _ = writeln!(s, "frozen_ps = {}", join(&self.frozen_ps));
        let _ = writeln!(s, "convex_reg = {:?}", self.convex_reg);
        let _ = writeln!(s, "convex_tol = {:?}", self.convex_tol);
        let _ = writeln!(s, "convex_steps = {}", self.convex_steps);
        let _ = writeln!(s, "convex_oracle_steps = {}", self.convex_oracle_steps);
        s
    }
}
