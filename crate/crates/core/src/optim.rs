//! Parameter updates with one learning rate per feature group.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::features::{FeaturePartition, LrAssignment};
use crate::nn::GradientSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const ADAM_DEFAULT_LR: f64 = 1e-3;
pub const ADAM_DEFAULT_BETA1: f64 = 0.9;
pub const ADAM_DEFAULT_BETA2: f64 = 0.999;
pub const ADAM_DEFAULT_EPSILON: f64 = 1e-8;

fn check_aligned(
    params: &[&mut Tensor],
    grads: &GradientSet,
    partition: &FeaturePartition,
    assignment: &LrAssignment,
) -> Result<()> {
    if partition.len() != assignment.len() {
        return Err(Error::Shape(format!(
            "assignment has {} rates for {} feature groups",
            assignment.len(),
            partition.len()
        )));
    }
    if params.len() != grads.tensors.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.tensors.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(&grads.tensors).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "tensor {i}: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    for g in &partition.groups {
        for s in &g.slices {
            match params.get(s.tensor) {
                Some(p) if s.range.end <= p.len() => {}
                _ => {
                    return Err(Error::Shape(format!(
                        "feature ({}, {}) points outside the parameters",
                        g.layer, g.feature_index
                    )))
                }
            }
        }
    }
    Ok(())
}

/// `theta <- theta - eta_g * grad` for every coordinate of every group `g`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &GradientSet,
    partition: &FeaturePartition,
    assignment: &LrAssignment,
) -> Result<()> {
    check_aligned(params, grads, partition, assignment)?;
    for (group, &lr) in partition.groups.iter().zip(&assignment.lrs) {
        if lr == 0.0 {
            continue;
        }
        for s in &group.slices {
            let g = &grads.tensors[s.tensor].data()[s.range.clone()];
            let p = &mut params[s.tensor].data_mut()[s.range.clone()];
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
    }
    Ok(())
}

/// Textbook SGD with a single learning rate.
pub fn plain_sgd_step(params: &mut [&mut Tensor], grads: &GradientSet, lr: f64) -> Result<()> {
    if params.len() != grads.tensors.len() {
        return Err(Error::Shape("parameter/gradient count mismatch".into()));
    }
    for (p, g) in params.iter_mut().zip(&grads.tensors) {
        if p.shape() != g.shape() {
            return Err(Error::Shape("parameter/gradient shape mismatch".into()));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self::with_hyperparams(
            params,
            ADAM_DEFAULT_BETA1,
            ADAM_DEFAULT_BETA2,
            ADAM_DEFAULT_EPSILON,
        )
    }

    pub fn with_hyperparams(params: &[&Tensor], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// Bias-corrected Adam where each feature group scales its step by its own rate.
///
/// Moments are updated for every coordinate; the step is skipped only for
/// groups with a zero rate. On non-finite moments nothing is modified.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut Tensor],
    grads: &GradientSet,
    partition: &FeaturePartition,
    assignment: &LrAssignment,
) -> Result<()> {
    check_aligned(params, grads, partition, assignment)?;
    if state.m.len() != params.len()
        || state
            .m
            .iter()
            .zip(params.iter())
            .any(|(m, p)| m.shape() != p.shape())
    {
        return Err(Error::Shape(
            "Adam state is not congruent with the parameters".into(),
        ));
    }
    let (b1, b2) = (state.beta1, state.beta2);
    let mut m_new = state.m.clone();
    let mut v_new = state.v.clone();
    for ((m, v), g) in m_new.iter_mut().zip(v_new.iter_mut()).zip(&grads.tensors) {
        for ((mv, vv), &gv) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
        }
    }
    if !(m_new.iter().all(Tensor::all_finite) && v_new.iter().all(Tensor::all_finite)) {
        return Err(Error::NonFinite(format!(
            "Adam moments at step {}",
            state.t + 1
        )));
    }
    let t = state.t + 1;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (group, &lr) in partition.groups.iter().zip(&assignment.lrs) {
        if lr == 0.0 {
            continue;
        }
        for s in &group.slices {
            let m = &m_new[s.tensor].data()[s.range.clone()];
            let v = &v_new[s.tensor].data()[s.range.clone()];
            let p = &mut params[s.tensor].data_mut()[s.range.clone()];
            for ((pv, &mv), &vv) in p.iter_mut().zip(m).zip(v) {
                let mhat = mv / c1;
                let vhat = vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + state.epsilon);
            }
        }
    }
    state.m = m_new;
    state.v = v_new;
    state.t = t;
    Ok(())
}

/// Each group independently keeps rate `eta0` with probability `p`, else 0.
pub fn freeze_mask(
    assignment: &LrAssignment,
    p: f64,
    eta0: f64,
    rng: &mut Rng,
) -> Result<LrAssignment> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    Ok(LrAssignment {
        lrs: assignment
            .lrs
            .iter()
            .map(|_| if rng.random::<f64>() < p { eta0 } else { 0.0 })
            .collect(),
    })
}
