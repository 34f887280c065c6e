//! The Alrao model: a network body with per-feature learning rates, several
//! output-layer clones with their own learning rates, and posterior weights
//! mixing the clones' predictive distributions.
//!
//! One training step:
//!
//! 1. forward the body once and keep its output `z`;
//! 2. backpropagate the loss of the *mixture* `sum_j a_j softmax(C_j(z))`
//!    through the body and apply per-feature updates (the weights `a_j` are
//!    constants here);
//! 3. update every clone on its own cross-entropy at `z`, as if it were the
//!    only output layer, so that clones with small weights keep learning;
//! 4. feed each clone's batch log-likelihood (computed before step 3) to the
//!    averaging posterior.

use std::fmt;

use crate::averaging::Averaging;
use crate::error::{Error, Result};
use crate::features::{
    classifier_lr_grid, partition_features, sample_feature_lrs, FeaturePartition, LrAssignment,
    LrInterval,
};
use crate::nn::{log_softmax, log_sum_exp, Dense, GradientSet, Layer, Mode, Network};
use crate::optim::{adam_step, sgd_step, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-sample log-likelihood floor applied before the averaging update.
pub const LOG_LIK_FLOOR: f64 = -30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AveragingKind {
    Switch { theta: f64 },
    Bma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlraoSpec {
    pub n_cl: usize,
    pub num_classes: usize,
    pub interval: LrInterval,
    pub averaging: AveragingKind,
    pub update: UpdateRule,
}

/// Work counters, used to check that one step costs exactly one body
/// backward pass plus one gradient evaluation per clone.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalCounters {
    pub body_forward: u64,
    pub body_backward: u64,
    pub classifier_grads: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlraoModel {
    pub preclassifier: Network,
    pub classifiers: Vec<Dense>,
    pub classifier_lrs: Vec<f64>,
    pub averaging: Averaging,
    pub feature_lrs: LrAssignment,
    pub partition: FeaturePartition,
    pub update: UpdateRule,
    pub body_adam: Option<AdamState>,
    pub classifier_adam: Vec<AdamState>,
    pub counters: EvalCounters,
    pub steps: u64,
    /// L2 penalty `l2/2 * |theta_j|^2` added to each clone's own loss. Zero
    /// except in the convex convergence check.
    pub classifier_l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradNormSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub mixture_loss: f64,
    pub per_classifier_loss: Vec<f64>,
    /// Weights after this step's averaging update.
    pub posterior: Vec<f64>,
    /// Per-feature gradient norms of the body.
    pub grad_norms: Option<GradNormSummary>,
}

impl fmt::Display for StepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mixture loss {}, clone losses {:?}, posterior {:?}",
            self.mixture_loss, self.per_classifier_loss, self.posterior
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollapseReport {
    /// Clones holding non-finite parameters.
    pub non_finite: Vec<usize>,
}

impl CollapseReport {
    pub fn is_healthy(&self) -> bool {
        self.non_finite.is_empty()
    }
}

/// Assemble an Alrao model around `preclassifier`.
///
/// Clones are initialized independently from `init_rng`; feature learning
/// rates are drawn once from `lr_rng` and never resampled.
pub fn build_alrao(
    preclassifier: Network,
    spec: &AlraoSpec,
    init_rng: &mut Rng,
    lr_rng: &mut Rng,
) -> Result<AlraoModel> {
    if spec.num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    let classifier_lrs = classifier_lr_grid(spec.n_cl, &spec.interval)?;
    let d = preclassifier.output_dim();
    let classifiers: Vec<Dense> = (0..spec.n_cl)
        .map(|_| Dense::init(d, spec.num_classes, init_rng))
        .collect();
    let partition = partition_features(&preclassifier)?;
    let feature_lrs = sample_feature_lrs(&partition, &spec.interval, lr_rng);
    let averaging = match spec.averaging {
        AveragingKind::Switch { theta } => Averaging::switch(spec.n_cl, theta)?,
        AveragingKind::Bma => Averaging::bma(spec.n_cl)?,
    };
    let (body_adam, classifier_adam) = match spec.update {
        UpdateRule::Sgd => (None, Vec::new()),
        UpdateRule::Adam => (
            Some(AdamState::new(&preclassifier.params())),
            classifiers
                .iter()
                .map(|c| AdamState::new(&[&c.weight, &c.bias]))
                .collect(),
        ),
    };
    Ok(AlraoModel {
        preclassifier,
        classifiers,
        classifier_lrs,
        averaging,
        feature_lrs,
        partition,
        update: spec.update,
        body_adam,
        classifier_adam,
        counters: EvalCounters::default(),
        steps: 0,
        classifier_l2: 0.0,
    })
}

/// Log-probabilities of every clone on a batch of body outputs, `[clone][sample * K + k]`.
fn clone_log_probs(classifiers: &[Dense], z: &Tensor) -> Vec<Vec<f64>> {
    let n = z.rows();
    classifiers
        .iter()
        .map(|c| {
            let k = c.out_units();
            let logits = c.apply(z.data(), n);
            let mut out = Vec::with_capacity(n * k);
            for i in 0..n {
                out.extend(log_softmax(&logits[i * k..(i + 1) * k]));
            }
            out
        })
        .collect()
}

struct MixturePass {
    z: Tensor,
    cache: crate::nn::ForwardCache,
    lps: Vec<Vec<f64>>,
    prior: Vec<f64>,
    mixture_loss: f64,
    d_logits: Vec<Vec<f64>>,
}

fn row_finite(lp: &[f64], i: usize, k: usize) -> bool {
    lp[i * k..(i + 1) * k].iter().all(|v| v.is_finite())
}

impl AlraoModel {
    pub fn n_cl(&self) -> usize {
        self.classifiers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classifiers[0].out_units()
    }

    pub fn classifier_param_count(&self) -> usize {
        self.classifiers
            .iter()
            .map(|c| c.weight.len() + c.bias.len())
            .sum()
    }

    pub fn posterior(&self) -> Vec<f64> {
        self.averaging.posterior()
    }

    /// Mixture predictive distribution `sum_j a_j softmax(C_j(z))`, shape `(n, K)`.
    ///
    /// Clones whose output is non-finite on a sample are left out of that
    /// sample's mixture and the remaining weights are renormalized.
    pub fn predict(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (z, _) = self.preclassifier.forward(x, mode)?;
        let n = z.rows();
        let k = self.num_classes();
        let a = self.posterior();
        let lps = clone_log_probs(&self.classifiers, &z);
        let mut probs = vec![0.0; n * k];
        for i in 0..n {
            let mut mass = 0.0;
            for (j, lp) in lps.iter().enumerate() {
                if a[j] == 0.0 || !row_finite(lp, i, k) {
                    continue;
                }
                mass += a[j];
                for c in 0..k {
                    probs[i * k + c] += a[j] * lp[i * k + c].exp();
                }
            }
            if mass > 0.0 {
                probs[i * k..(i + 1) * k]
                    .iter_mut()
                    .for_each(|p| *p /= mass);
            } else {
                probs[i * k..(i + 1) * k]
                    .iter_mut()
                    .for_each(|p| *p = f64::NAN);
            }
        }
        Tensor::new(vec![n, k], probs)
    }

    /// Forward pass of the body, clone log-probabilities, and the mixture
    /// loss with its gradient on every clone's logits.
    fn mixture_pass(&self, x: &Tensor, ys: &[usize], mode: Mode) -> Result<MixturePass> {
        let n = x.rows();
        if n == 0 || n != ys.len() {
            return Err(Error::InvalidArgument(format!(
                "batch of {n} inputs with {} labels",
                ys.len()
            )));
        }
        let k = self.num_classes();
        if let Some(&y) = ys.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let (z, cache) = self.preclassifier.forward(x, mode)?;
        let lps = clone_log_probs(&self.classifiers, &z);
        let prior = self.posterior();
        let log_a: Vec<f64> = prior.iter().map(|a| a.ln()).collect();

        let mut mixture_loss = 0.0;
        let mut d_logits = vec![vec![0.0; n * k]; self.n_cl()];
        let mut terms = vec![f64::NEG_INFINITY; self.n_cl()];
        for (i, &y) in ys.iter().enumerate() {
            for (j, lp) in lps.iter().enumerate() {
                terms[j] = if row_finite(lp, i, k) {
                    log_a[j] + lp[i * k + y]
                } else {
                    f64::NEG_INFINITY
                };
            }
            let log_mix = log_sum_exp(&terms);
            mixture_loss -= log_mix;
            if !log_mix.is_finite() {
                continue;
            }
            for (j, lp) in lps.iter().enumerate() {
                // Responsibility of clone j for sample i.
                let r = (terms[j] - log_mix).exp();
                if r == 0.0 {
                    continue;
                }
                for c in 0..k {
                    let onehot = if c == y { 1.0 } else { 0.0 };
                    d_logits[j][i * k + c] = r * (lp[i * k + c].exp() - onehot) / n as f64;
                }
            }
        }
        mixture_loss /= n as f64;
        Ok(MixturePass {
            z,
            cache,
            lps,
            prior,
            mixture_loss,
            d_logits,
        })
    }

    fn body_output_grad(&self, pass: &MixturePass) -> Result<Tensor> {
        let n = pass.z.rows();
        let mut dz = vec![0.0; pass.z.len()];
        for (c, g) in self.classifiers.iter().zip(&pass.d_logits) {
            for (acc, v) in dz.iter_mut().zip(c.input_grad(g, n)) {
                *acc += v;
            }
        }
        Tensor::new(pass.z.shape().to_vec(), dz)
    }

    /// Mixture loss and its gradient with respect to the body parameters,
    /// without updating anything.
    pub fn body_gradient(
        &self,
        x: &Tensor,
        ys: &[usize],
        mode: Mode,
    ) -> Result<(f64, GradientSet)> {
        let pass = self.mixture_pass(x, ys, mode)?;
        let dz = self.body_output_grad(&pass)?;
        let (g, _) = self.preclassifier.backward(&pass.cache, &dz)?;
        Ok((pass.mixture_loss, g))
    }

    /// Mixture loss on a labelled batch.
    pub fn mixture_loss(&self, x: &Tensor, ys: &[usize], mode: Mode) -> Result<f64> {
        Ok(self.mixture_pass(x, ys, mode)?.mixture_loss)
    }

    /// One Alrao training step on a minibatch.
    pub fn step(&mut self, x: &Tensor, ys: &[usize]) -> Result<StepReport> {
        let pass = self.mixture_pass(x, ys, Mode::Train)?;
        self.counters.body_forward += 1;
        let n = x.rows();
        let k = self.num_classes();
        let lps = &pass.lps;

        let per_classifier_loss: Vec<f64> = lps
            .iter()
            .map(|lp| {
                -ys.iter()
                    .enumerate()
                    .map(|(i, &y)| lp[i * k + y])
                    .sum::<f64>()
                    / n as f64
            })
            .collect();
        let floored_ll: Vec<f64> = lps
            .iter()
            .map(|lp| {
                ys.iter()
                    .enumerate()
                    .map(|(i, &y)| {
                        let v = lp[i * k + y];
                        if v.is_nan() {
                            LOG_LIK_FLOOR
                        } else {
                            v.max(LOG_LIK_FLOOR)
                        }
                    })
                    .sum()
            })
            .collect();

        if !pass.mixture_loss.is_finite() {
            return Err(Error::Diverged {
                report: Box::new(StepReport {
                    mixture_loss: pass.mixture_loss,
                    per_classifier_loss,
                    posterior: pass.prior,
                    grad_norms: None,
                }),
            });
        }

        // Mixture gradient into the body, through the pre-update clones.
        let dz = self.body_output_grad(&pass)?;
        let (body_grads, _) = self.preclassifier.backward(&pass.cache, &dz)?;
        self.counters.body_backward += 1;
        let grad_norms = self.feature_grad_norms(&body_grads);

        match self.update {
            UpdateRule::Sgd => sgd_step(
                &mut self.preclassifier.params_mut(),
                &body_grads,
                &self.partition,
                &self.feature_lrs,
            )?,
            UpdateRule::Adam => adam_step(
                self.body_adam.as_mut().expect("adam state for adam rule"),
                &mut self.preclassifier.params_mut(),
                &body_grads,
                &self.partition,
                &self.feature_lrs,
            )?,
        }
        self.preclassifier.apply_batch_stats(&pass.cache);

        // Each clone on its own loss; no gradient reaches the body.
        for (j, lp) in lps.iter().enumerate() {
            let mut g = vec![0.0; n * k];
            for (i, &y) in ys.iter().enumerate() {
                for c in 0..k {
                    let onehot = if c == y { 1.0 } else { 0.0 };
                    g[i * k + c] = (lp[i * k + c].exp() - onehot) / n as f64;
                }
            }
            let clf = &mut self.classifiers[j];
            let (mut gw, mut gb) = clf.param_grads(pass.z.data(), &g, n);
            self.counters.classifier_grads += 1;
            if self.classifier_l2 != 0.0 {
                let l2 = self.classifier_l2;
                for (gv, w) in gw.data_mut().iter_mut().zip(clf.weight.data()) {
                    *gv += l2 * w;
                }
                for (gv, b) in gb.data_mut().iter_mut().zip(clf.bias.data()) {
                    *gv += l2 * b;
                }
            }
            let grads = GradientSet {
                tensors: vec![gw, gb],
            };
            let lr = self.classifier_lrs[j];
            let part = FeaturePartition::single_group(&[&clf.weight, &clf.bias]);
            let lrs = LrAssignment::uniform(1, lr);
            let mut params = [&mut clf.weight, &mut clf.bias];
            match self.update {
                UpdateRule::Sgd => sgd_step(&mut params, &grads, &part, &lrs)?,
                UpdateRule::Adam => {
                    // A diverged clone is left alone rather than failing the run.
                    if let Err(e) = adam_step(
                        &mut self.classifier_adam[j],
                        &mut params,
                        &grads,
                        &part,
                        &lrs,
                    ) {
                        log::debug!("clone {j} skipped: {e}");
                    }
                }
            }
        }

        let posterior = self.averaging.update(&floored_ll)?;
        self.steps += 1;
        Ok(StepReport {
            mixture_loss: pass.mixture_loss,
            per_classifier_loss,
            posterior,
            grad_norms,
        })
    }

    fn feature_grad_norms(&self, grads: &GradientSet) -> Option<GradNormSummary> {
        if self.partition.is_empty() {
            return None;
        }
        let norms: Vec<f64> = self
            .partition
            .groups
            .iter()
            .map(|g| {
                g.slices
                    .iter()
                    .map(|s| {
                        grads.tensors[s.tensor].data()[s.range.clone()]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Some(GradNormSummary {
            min: norms.iter().copied().fold(f64::INFINITY, f64::min),
            mean: norms.iter().sum::<f64>() / norms.len() as f64,
            max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    /// Flag clones with non-finite parameters. Their weight in the mixture is
    /// driven down by the likelihood floor, never set directly.
    pub fn collapse_check(&self) -> CollapseReport {
        CollapseReport {
            non_finite: self
                .classifiers
                .iter()
                .enumerate()
                .filter(|(_, c)| !(c.weight.all_finite() && c.bias.all_finite()))
                .map(|(j, _)| j)
                .collect(),
        }
    }

    /// Body followed by clone `j`, as an ordinary network.
    pub fn as_network(&self, j: usize) -> Result<Network> {
        let mut layers = self.preclassifier.layers().to_vec();
        layers.push(Layer::Dense(self.classifiers[j].clone()));
        Network::new(self.preclassifier.input_shape().to_vec(), layers)
    }
}

/// Log-density of `target` under a unit-variance Gaussian centred on `pred`.
///
/// Likelihood adapter for regression clones; floored like the categorical case.
pub fn gaussian_log_likelihood(pred: &[f64], target: &[f64]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let v: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| -0.5 * (p - t) * (p - t) - half_ln_2pi)
        .sum();
    if v.is_nan() {
        LOG_LIK_FLOOR
    } else {
        v.max(LOG_LIK_FLOOR)
    }
}

/// Summed per-clone Gaussian log-likelihoods of a regression batch.
pub fn regression_clone_log_liks(clone_preds: &[Tensor], targets: &Tensor) -> Result<Vec<f64>> {
    clone_preds
        .iter()
        .map(|p| {
            if p.shape() != targets.shape() {
                return Err(Error::Shape(format!(
                    "prediction {:?} vs target {:?}",
                    p.shape(),
                    targets.shape()
                )));
            }
            Ok((0..p.rows())
                .map(|i| gaussian_log_likelihood(p.row(i), targets.row(i)))
                .sum())
        })
        .collect()
}
