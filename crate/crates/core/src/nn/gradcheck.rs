use crate::error::{Error, Result};
use crate::nn::network::GradientSet;
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn finite_diff_gradient<F>(mut f: F, params: &[Tensor], h: f64) -> Result<GradientSet>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = vec![0.0; params[t].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = f(&work);
            work[t].data_mut()[i] = orig - h;
            let minus = f(&work);
            work[t].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at tensor {t} coordinate {i}: f(+h)={plus}, f(-h)={minus}"
                )));
            }
            *gi = (plus - minus) / (2.0 * h);
        }
        out.push(Tensor::new(params[t].shape().to_vec(), g)?);
    }
    Ok(GradientSet { tensors: out })
}

/// `||a - b|| / max(||a||, ||b||)` over all coordinates; 0 when both vanish.
pub fn relative_error(a: &GradientSet, b: &GradientSet) -> f64 {
    let mut diff = 0.0;
    let (mut na, mut nb) = (0.0, 0.0);
    for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic() {
        let g = finite_diff_gradient(
            |p| p[0].data()[0].powi(2),
            &[Tensor::from_vec(vec![3.0])],
            1e-5,
        )
        .unwrap();
        assert_abs_diff_eq!(g.tensors[0].data()[0], 6.0, epsilon = 1e-8);
    }

    #[test]
    fn constant_is_zero() {
        let g = finite_diff_gradient(|_| 4.2, &[Tensor::zeros(&[2, 3])], 1e-5).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let p = [Tensor::from_vec(vec![1.0])];
        assert!(finite_diff_gradient(|_| 0.0, &p, 0.0).is_err());
        assert!(finite_diff_gradient(|_| f64::NAN, &p, 1e-5).is_err());
    }
}
