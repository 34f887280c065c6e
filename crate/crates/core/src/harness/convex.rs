//! Convergence check in the convex case: a linear softmax classifier on
//! L2-regularized cross-entropy, trained full-batch by Alrao with Bayesian
//! model averaging, must end within `tol` of the optimal loss as soon as one
//! clone rate lies below `1/lambda`.

use std::fmt;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::engine::{build_alrao, AlraoSpec, AveragingKind, UpdateRule};
use crate::error::{Error, Result};
use crate::features::{classifier_lr_grid, LrInterval};
use crate::nn::{batch_cross_entropy, Dense, Mode, Network};
use crate::rng::stream;
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::run::prepare_data;

const POWER_ITERS: usize = 200;
const HVP_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    /// No clone rate below `1/lambda`; the check does not apply.
    HypothesisUnmet,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::HypothesisUnmet => "hypothesis-unmet",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexReport {
    pub verdict: Verdict,
    /// Largest Hessian eigenvalue of the regularized loss at the origin.
    pub lambda: f64,
    pub l_star: f64,
    /// Gradient norm at the oracle's final iterate.
    pub oracle_grad_norm: f64,
    pub alrao_loss: Option<f64>,
    pub classifier_lrs: Vec<f64>,
    pub posterior: Vec<f64>,
    pub tol: f64,
    pub reg: f64,
}

/// Mean cross-entropy plus `reg/2 * (|W|^2 + |b|^2)`, with its gradient.
pub fn regularized_loss(
    clf: &Dense,
    x: &Tensor,
    ys: &[usize],
    reg: f64,
) -> Result<(f64, Tensor, Tensor)> {
    let n = x.rows();
    let logits = Tensor::new(vec![n, clf.out_units()], clf.apply(x.data(), n))?;
    let (ce, g) = batch_cross_entropy(&logits, ys)?;
    let (mut gw, mut gb) = clf.param_grads(x.data(), g.data(), n);
    for (gv, w) in gw.data_mut().iter_mut().zip(clf.weight.data()) {
        *gv += reg * w;
    }
    for (gv, b) in gb.data_mut().iter_mut().zip(clf.bias.data()) {
        *gv += reg * b;
    }
    let penalty = 0.5 * reg * (clf.weight.sq_norm() + clf.bias.sq_norm());
    Ok((ce + penalty, gw, gb))
}

fn flat_grad(clf: &Dense, x: &Tensor, ys: &[usize], reg: f64) -> Result<Vec<f64>> {
    let (_, gw, gb) = regularized_loss(clf, x, ys, reg)?;
    let mut v = gw.into_data();
    v.extend(gb.into_data());
    Ok(v)
}

fn offset(clf: &Dense, v: &[f64], h: f64) -> Dense {
    let mut c = clf.clone();
    let nw = c.weight.len();
    for (w, d) in c.weight.data_mut().iter_mut().zip(&v[..nw]) {
        *w += h * d;
    }
    for (b, d) in c.bias.data_mut().iter_mut().zip(&v[nw..]) {
        *b += h * d;
    }
    c
}

fn zero_classifier(d: usize, k: usize) -> Dense {
    Dense {
        weight: Tensor::zeros(&[k, d]),
        bias: Tensor::zeros(&[k]),
    }
}

/// Largest Hessian eigenvalue at `at`, by power iteration on central
/// finite-difference Hessian-vector products.
pub fn hessian_max_eig(at: &Dense, x: &Tensor, ys: &[usize], reg: f64, seed: u64) -> Result<f64> {
    let dim = at.weight.len() + at.bias.len();
    let mut rng = stream(seed, "power");
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERS {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        let gp = flat_grad(&offset(at, &v, HVP_STEP), x, ys, reg)?;
        let gm = flat_grad(&offset(at, &v, -HVP_STEP), x, ys, reg)?;
        let hv: Vec<f64> = gp
            .iter()
            .zip(&gm)
            .map(|(p, m)| (p - m) / (2.0 * HVP_STEP))
            .collect();
        let next = v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>();
        v = hv;
        let done = (next - lambda).abs() <= 1e-12 * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    Ok(lambda)
}

/// Minimum of the regularized loss by plain gradient descent from the
/// origin with step `step`; returns the loss and the final gradient norm.
pub fn gd_oracle(
    x: &Tensor,
    ys: &[usize],
    k: usize,
    reg: f64,
    step: f64,
    iters: usize,
) -> Result<(f64, f64)> {
    let mut clf = zero_classifier(x.row_len(), k);
    for _ in 0..iters {
        let (_, gw, gb) = regularized_loss(&clf, x, ys, reg)?;
        for (w, g) in clf.weight.data_mut().iter_mut().zip(gw.data()) {
            *w -= step * g;
        }
        for (b, g) in clf.bias.data_mut().iter_mut().zip(gb.data()) {
            *b -= step * g;
        }
    }
    let (loss, gw, gb) = regularized_loss(&clf, x, ys, reg)?;
    Ok((loss, (gw.sq_norm() + gb.sq_norm()).sqrt()))
}

/// Run the check on the training split of `cfg`'s dataset with the
/// interval `[eta_min, eta_max]` and `n_cl` clones.
pub fn run_convex_check(cfg: &TrainConfig) -> Result<ConvexReport> {
    let data = prepare_data(cfg)?;
    let train = data.train;
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "convex check needs a nonempty training split".into(),
        ));
    }
    let k = train.meta.num_classes;
    let d = train.example_len();
    let n = train.len();
    let x = train.xs.clone().reshape(vec![n, d])?;
    let ys = &train.ys;
    let reg = cfg.convex_reg;

    let lambda = hessian_max_eig(&zero_classifier(d, k), &x, ys, reg, cfg.seed)?;
    let (l_star, oracle_grad_norm) =
        gd_oracle(&x, ys, k, reg, 0.5 / lambda, cfg.convex_oracle_steps)?;

    let interval = LrInterval::new(cfg.eta_min, cfg.eta_max)?;
    let classifier_lrs = classifier_lr_grid(cfg.n_cl, &interval)?;
    let mut report = ConvexReport {
        verdict: Verdict::HypothesisUnmet,
        lambda,
        l_star,
        oracle_grad_norm,
        alrao_loss: None,
        classifier_lrs,
        posterior: Vec::new(),
        tol: cfg.convex_tol,
        reg,
    };
    if !report.classifier_lrs.iter().any(|&eta| eta < 1.0 / lambda) {
        return Ok(report);
    }

    let spec = AlraoSpec {
        n_cl: cfg.n_cl,
        num_classes: k,
        interval,
        averaging: AveragingKind::Bma,
        update: UpdateRule::Sgd,
    };
    let mut model = build_alrao(
        Network::identity(vec![d]),
        &spec,
        &mut stream(cfg.seed, "init"),
        &mut stream(cfg.seed, "lrs"),
    )?;
    model.classifier_l2 = reg;
    for _ in 0..cfg.convex_steps {
        model.step(&x, ys)?;
    }
    let a = model.posterior();
    // Mixture cross-entropy plus the posterior-weighted penalty; by convexity
    // this is at most the posterior average of the clones' own losses.
    let penalty: f64 = model
        .classifiers
        .iter()
        .zip(&a)
        .filter(|(c, &w)| w > 0.0 && c.weight.all_finite() && c.bias.all_finite())
        .map(|(c, &w)| w * 0.5 * reg * (c.weight.sq_norm() + c.bias.sq_norm()))
        .sum();
    let loss = model.mixture_loss(&x, ys, Mode::Eval)? + penalty;
    report.alrao_loss = Some(loss);
    report.posterior = a;
    report.verdict = if loss <= l_star + cfg.convex_tol {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(report)
}

pub fn emit_convex(report: &ConvexReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let list = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:?}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    let text = format!(
        "verdict = {}\nlambda = {:?}\ninv_lambda = {:?}\nl_star = {:?}\noracle_grad_norm = {:?}\nalrao_loss = {}\ntol = {:?}\nreg = {:?}\nclassifier_lrs = {}\nposterior = {}\n",
        report.verdict,
        report.lambda,
        1.0 / report.lambda,
        report.l_star,
        report.oracle_grad_norm,
        report.alrao_loss.map_or("none".into(), |l| format!("{l:?}")),
        report.tol,
        report.reg,
        list(&report.classifier_lrs),
        list(&report.posterior),
    );
    std::fs::write(out_dir.join("convex.txt"), text)?;
    Ok(())
}
