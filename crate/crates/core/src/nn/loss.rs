use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `log(sum(exp(v)))` with max subtraction. Empty or all `-inf` input gives `-inf`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Negative log-likelihood of class `y` under `softmax(logits)` and its
/// gradient `softmax(logits) - onehot(y)`.
pub fn softmax_cross_entropy(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {k}"
        )));
    }
    if y >= k {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {k} classes"
        )));
    }
    let lp = log_softmax(logits);
    let mut grad: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    grad[y] -= 1.0;
    Ok((-lp[y], grad))
}

/// Mean cross-entropy over a `(n, K)` batch; the gradient is already divided by `n`.
pub fn batch_cross_entropy(logits: &Tensor, ys: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.rows();
    if n != ys.len() {
        return Err(Error::Shape(format!(
            "{n} logit rows for {} labels",
            ys.len()
        )));
    }
    let k = logits.row_len();
    let mut grad = Vec::with_capacity(n * k);
    let mut total = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let (l, g) = softmax_cross_entropy(logits.row(i), y)?;
        total += l;
        grad.extend(g.into_iter().map(|v| v / n as f64));
    }
    Ok((
        total / n as f64,
        Tensor::new(logits.shape().to_vec(), grad)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_logits() {
        let (l, g) = softmax_cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let (l, g) = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(l.abs() < 1e-300_f64.max(f64::EPSILON));
        assert!(g.iter().all(|v| v.is_finite()));
        let (l, _) = softmax_cross_entropy(&[1000.0, 0.0], 1).unwrap();
        assert_abs_diff_eq!(l, 1000.0, epsilon = 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        assert!(softmax_cross_entropy(&[0.0, 1.0], 2).is_err());
        assert!(softmax_cross_entropy(&[0.0], 0).is_err());
    }

    #[test]
    fn log_sum_exp_edges() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
        assert_abs_diff_eq!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]), 0.0);
        assert_abs_diff_eq!(log_sum_exp(&[800.0, 800.0]), 800.0 + std::f64::consts::LN_2);
    }
}
