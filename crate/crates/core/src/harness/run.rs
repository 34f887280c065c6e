//! One training run with validation early stopping.

use crate::averaging::{Averaging, PosteriorRow};
use crate::datasets::{
    downsample2, epoch_batches, gen_blobs, load_idx, normalize_channels, split, Dataset,
};
use crate::engine::{build_alrao, AlraoModel, AlraoSpec, AveragingKind, UpdateRule};
use crate::error::{Error, Result};
use crate::features::{partition_features, FeaturePartition, LrAssignment, LrInterval, LrRow};
use crate::nn::{batch_cross_entropy, log_softmax, Layer, Mode, Network, NetworkBuilder};
use crate::optim::{adam_step, freeze_mask, sgd_step, AdamState};
use crate::rng::{derive_seed, stream, Rng};
use crate::tensor::Tensor;

use super::config::{AveragingChoice, DatasetSpec, LayerSpec, OptimizerKind, TrainConfig};

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Load or generate the dataset, split it, and standardize all splits with
/// training statistics. Depends only on the dataset keys and `seed`.
pub fn prepare_data(cfg: &TrainConfig) -> Result<Splits> {
    let full = match &cfg.dataset {
        DatasetSpec::Blobs {
            classes,
            dim,
            per_class,
            spread,
        } => gen_blobs(
            *classes,
            *dim,
            *per_class,
            *spread,
            derive_seed(cfg.seed, "data"),
        )?,
        DatasetSpec::Idx {
            images,
            labels,
            downsample,
        } => {
            let ds = load_idx(images, labels)?;
            if *downsample {
                downsample2(&ds)?
            } else {
                ds
            }
        }
    };
    let s = split(full.len(), cfg.split, derive_seed(cfg.seed, "split"))?;
    let (train, val, test) = (
        full.subset(&s.train),
        full.subset(&s.val),
        full.subset(&s.test),
    );
    if !cfg.normalize || train.is_empty() {
        return Ok(Splits { train, val, test });
    }
    let (norm, train) = normalize_channels(&train)?;
    Ok(Splits {
        val: norm.apply(&val)?,
        test: norm.apply(&test)?,
        train,
    })
}

/// Layers before the output layer.
pub fn build_body(model: &[LayerSpec], input_shape: &[usize], rng: &mut Rng) -> Result<Network> {
    let mut b: NetworkBuilder = Network::builder(input_shape);
    for l in model {
        b = match *l {
            LayerSpec::Dense(n) => b.dense(n, rng),
            LayerSpec::Conv {
                out_channels,
                kernel,
                padding,
            } => b.conv2d(out_channels, kernel, padding, rng),
            LayerSpec::BatchNorm => b.batchnorm(),
            LayerSpec::Act(a) => b.activation(a),
        };
    }
    b.build()
}

/// What a run trains: either an ordinary network with per-feature rates or
/// an Alrao model.
#[derive(Debug, Clone)]
pub enum Learner {
    Plain {
        net: Network,
        partition: FeaturePartition,
        lrs: LrAssignment,
        adam: Option<AdamState>,
    },
    Alrao(Box<AlraoModel>),
}

/// How the per-feature rates of a plain network are set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlainRates {
    Uniform,
    /// Keep each feature trainable with this probability, else rate 0.
    Frozen(f64),
}

impl Learner {
    /// Build the learner for `cfg` under run seed `seed`.
    pub fn new(cfg: &TrainConfig, data: &Splits, seed: u64, rates: PlainRates) -> Result<Self> {
        let k = data.train.meta.num_classes;
        let mut init = stream(seed, "init");
        let body = build_body(&cfg.model, &data.train.meta.input_shape, &mut init)?;
        if cfg.optimizer.is_alrao() {
            let spec = AlraoSpec {
                n_cl: cfg.n_cl,
                num_classes: k,
                interval: LrInterval::new(cfg.eta_min, cfg.eta_max)?,
                averaging: match cfg.averaging {
                    AveragingChoice::Switch => AveragingKind::Switch { theta: cfg.theta },
                    AveragingChoice::Bma => AveragingKind::Bma,
                },
                update: if cfg.optimizer == OptimizerKind::AlraoAdam {
                    UpdateRule::Adam
                } else {
                    UpdateRule::Sgd
                },
            };
            let model = build_alrao(body, &spec, &mut init, &mut stream(seed, "lrs"))?;
            return Ok(Learner::Alrao(Box::new(model)));
        }
        let mut layers = body.layers().to_vec();
        layers.push(Layer::Dense(crate::nn::Dense::init(
            body.output_dim(),
            k,
            &mut init,
        )));
        let net = Network::new(body.input_shape().to_vec(), layers)?;
        let partition = partition_features(&net)?;
        let (lr, adam) = match cfg.optimizer {
            OptimizerKind::Adam => (cfg.adam_lr, Some(AdamState::new(&net.params()))),
            _ => (cfg.lr, None),
        };
        let base = LrAssignment::uniform(partition.len(), lr);
        let lrs = match rates {
            PlainRates::Uniform => base,
            PlainRates::Frozen(p) => freeze_mask(&base, p, lr, &mut stream(seed, "mask"))?,
        };
        Ok(Learner::Plain {
            net,
            partition,
            lrs,
            adam,
        })
    }

    /// One minibatch update; returns the training loss on the batch.
    pub fn step(&mut self, x: &Tensor, ys: &[usize]) -> Result<f64> {
        match self {
            Learner::Alrao(m) => Ok(m.step(x, ys)?.mixture_loss),
            Learner::Plain {
                net,
                partition,
                lrs,
                adam,
            } => {
                let (out, cache) = net.forward(x, Mode::Train)?;
                let (loss, g) = batch_cross_entropy(&out, ys)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("training loss {loss}")));
                }
                let (grads, _) = net.backward(&cache, &g)?;
                match adam {
                    Some(state) => adam_step(state, &mut net.params_mut(), &grads, partition, lrs)?,
                    None => sgd_step(&mut net.params_mut(), &grads, partition, lrs)?,
                }
                net.apply_batch_stats(&cache);
                Ok(loss)
            }
        }
    }

    /// Mean loss in nats and top-1 accuracy, in evaluation mode.
    pub fn evaluate(&self, ds: &Dataset) -> Result<Metrics> {
        if ds.is_empty() {
            return Ok(Metrics {
                loss: f64::NAN,
                top1: f64::NAN,
            });
        }
        let (mut loss, mut correct) = (0.0, 0usize);
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (x, ys) = ds.batch(chunk);
            let logp = match self {
                Learner::Plain { net, .. } => {
                    let out = net.predict(&x)?;
                    let k = out.row_len();
                    let mut lp = Vec::with_capacity(out.len());
                    for i in 0..out.rows() {
                        lp.extend(log_softmax(out.row(i)));
                    }
                    Tensor::new(vec![out.rows(), k], lp)?
                }
                Learner::Alrao(m) => {
                    let p = m.predict(&x, Mode::Eval)?;
                    let shape = p.shape().to_vec();
                    Tensor::new(shape, p.into_data().into_iter().map(f64::ln).collect())?
                }
            };
            for (i, &y) in ys.iter().enumerate() {
                let row = logp.row(i);
                loss -= row[y];
                // Ties and NaN rows resolve to the first maximal class.
                let best = row
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc },
                    )
                    .0;
                if best == y && row[y].is_finite() {
                    correct += 1;
                }
            }
        }
        let n = ds.len() as f64;
        let loss = loss / n;
        Ok(Metrics {
            loss: if loss.is_nan() { f64::INFINITY } else { loss },
            top1: correct as f64 / n,
        })
    }

    pub fn posterior(&self) -> Option<(u64, Vec<f64>)> {
        match self {
            Learner::Alrao(m) => {
                let t = match &m.averaging {
                    Averaging::Switch(s) => s.t,
                    Averaging::Bma(_) => m.steps,
                };
                Some((t, m.posterior()))
            }
            Learner::Plain { .. } => None,
        }
    }

    /// Learning rate of every feature group, for `lrs.csv`.
    pub fn lr_rows(&self) -> Vec<LrRow> {
        let (partition, lrs) = match self {
            Learner::Alrao(m) => (&m.partition, &m.feature_lrs),
            Learner::Plain { partition, lrs, .. } => (partition, lrs),
        };
        partition
            .groups
            .iter()
            .zip(&lrs.lrs)
            .enumerate()
            .map(|(group_id, (g, &lr))| LrRow {
                group_id,
                layer: g.layer,
                feature_index: g.feature_index,
                lr,
            })
            .collect()
    }

    pub fn classifier_lrs(&self) -> Option<&[f64]> {
        match self {
            Learner::Alrao(m) => Some(&m.classifier_lrs),
            Learner::Plain { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Csv(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub run_id: String,
    pub epoch: usize,
    pub split: SplitName,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// Training loss became non-finite during this epoch.
    Failed {
        epoch: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub run_id: String,
    pub config_echo: String,
    pub curves: Vec<CurveRow>,
    pub posterior: Vec<PosteriorRow>,
    pub lrs: Vec<LrRow>,
    pub status: RunStatus,
    pub best_epoch: Option<usize>,
    pub best_val: Option<Metrics>,
    /// Validation metrics after the last completed epoch.
    pub final_val: Option<Metrics>,
    /// Test metrics of the best-epoch model.
    pub test: Option<Metrics>,
    pub epochs_run: usize,
}

impl RunLog {
    pub fn failed(&self) -> bool {
        matches!(self.status, RunStatus::Failed { .. })
    }

    /// Validation loss used to rank runs; failed runs rank last.
    pub fn selection_loss(&self) -> f64 {
        match (self.status, self.best_val) {
            (RunStatus::Completed, Some(m)) if !m.loss.is_nan() => m.loss,
            _ => f64::INFINITY,
        }
    }
}

/// Knobs that differ between a plain run and a grid or sweep cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    pub epochs: usize,
    /// `None` trains for exactly `epochs`.
    pub patience: Option<usize>,
    pub rates: PlainRates,
}

impl RunOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        RunOptions {
            seed: cfg.seed,
            epochs: cfg.max_epochs,
            patience: Some(cfg.patience),
            rates: PlainRates::Uniform,
        }
    }
}

/// Generate data from `cfg` and train under its own seed.
pub fn run_train(cfg: &TrainConfig) -> Result<RunLog> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    train_on(cfg, &data, "run", RunOptions::from_config(cfg))
}

/// Train on prepared splits. Divergence ends the run with a failed status
/// instead of an error.
pub fn train_on(
    cfg: &TrainConfig,
    data: &Splits,
    run_id: &str,
    opts: RunOptions,
) -> Result<RunLog> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation splits must be nonempty".into(),
        ));
    }
    let mut learner = Learner::new(cfg, data, opts.seed, opts.rates)?;
    let mut batch_rng = stream(opts.seed, "batches");
    let mut echo = cfg.echo();
    echo.push_str(&format!(
        "# run_id = {run_id}\n# run_seed = {}\n# epochs = {}\n",
        opts.seed, opts.epochs
    ));
    if let Some(p) = opts.patience {
        echo.push_str(&format!("# patience = {p}\n"));
    }
    if let Some(cl) = learner.classifier_lrs() {
        let v: Vec<String> = cl.iter().map(|x| format!("{x:?}")).collect();
        echo.push_str(&format!("# classifier_lrs = {}\n", v.join(",")));
    }
    let mut log = RunLog {
        run_id: run_id.to_string(),
        config_echo: echo,
        curves: Vec::new(),
        posterior: Vec::new(),
        lrs: learner.lr_rows(),
        status: RunStatus::Completed,
        best_epoch: None,
        best_val: None,
        final_val: None,
        test: None,
        epochs_run: 0,
    };
    let row = |epoch, split: SplitName, m: Metrics| CurveRow {
        run_id: run_id.to_string(),
        epoch,
        split,
        loss: m.loss,
        top1: m.top1,
    };

    let mut best: Option<Learner> = None;
    let mut step: u64 = 0;
    'epochs: for epoch in 1..=opts.epochs {
        for batch in epoch_batches(data.train.len(), cfg.batch_size, &mut batch_rng) {
            let (x, ys) = data.train.batch(&batch);
            match learner.step(&x, &ys) {
                Ok(loss) if loss.is_finite() => {}
                Ok(_) | Err(Error::Diverged { .. } | Error::NonFinite(_)) => {
                    log::info!("{run_id}: diverged in epoch {epoch}");
                    log.status = RunStatus::Failed { epoch };
                    log.curves.push(row(
                        epoch,
                        SplitName::Train,
                        Metrics {
                            loss: f64::INFINITY,
                            top1: f64::NAN,
                        },
                    ));
                    log.epochs_run = epoch;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            step += 1;
            if let Some((t, weights)) = learner.posterior() {
                log.posterior.push(PosteriorRow { step, t, weights });
            }
        }
        let train_m = learner.evaluate(&data.train)?;
        let val_m = learner.evaluate(&data.val)?;
        log.curves.push(row(epoch, SplitName::Train, train_m));
        log.curves.push(row(epoch, SplitName::Val, val_m));
        log.epochs_run = epoch;
        log.final_val = Some(val_m);
        if log.best_val.is_none_or(|b| val_m.loss < b.loss) {
            log.best_epoch = Some(epoch);
            log.best_val = Some(val_m);
            best = Some(learner.clone());
        }
        if let (Some(p), Some(b)) = (opts.patience, log.best_epoch) {
            if epoch - b >= p {
                break;
            }
        }
    }

    if let (Some(model), Some(epoch)) = (&best, log.best_epoch) {
        let m = model.evaluate(&data.test)?;
        log.test = Some(m);
        log.curves.push(row(epoch, SplitName::Test, m));
    }
    Ok(log)
}
