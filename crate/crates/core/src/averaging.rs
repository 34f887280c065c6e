//! Online model-averaging weights over the classifier clones.
//!
//! The switch distribution is a Bayesian mixture over *switch sequences*:
//! piecewise-constant choices of which classifier predicts each observation.
//! Its prior picks a classifier uniformly for each segment, continues with
//! probability `theta` after each segment, and places segment boundaries with
//! `pi_T(t) = 1 / (t (t + 1))`. The posterior over the classifier that will
//! predict the next observation is tracked exactly by a two-state-per-model
//! forward recursion in log space:
//!
//! * `a` states: the current segment may still end. After observation `t`
//!   a fraction `1 / (t + 1)` of the pooled `a` mass leaves through a switch
//!   and is redistributed over all classifiers.
//! * `b` states: the current segment is the last one.
//!
//! [`switch_bruteforce_oracle`] evaluates the same mixture by enumerating
//! every switch sequence and serves as the reference for the recursion.

use crate::error::{Error, Result};
use crate::nn::log_sum_exp;

pub const DEFAULT_THETA: f64 = 0.999;

fn check_log_lik(log_lik: &[f64], n_cl: usize) -> Result<()> {
    if log_lik.len() != n_cl {
        return Err(Error::Shape(format!(
            "{} log-likelihoods for {n_cl} classifiers",
            log_lik.len()
        )));
    }
    if let Some(j) = log_lik
        .iter()
        .position(|v| v.is_nan() || *v == f64::INFINITY)
    {
        return Err(Error::NonFinite(format!(
            "log-likelihood of classifier {j} is {}",
            log_lik[j]
        )));
    }
    Ok(())
}

fn normalized(log_w: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(log_w);
    log_w.iter().map(|&w| (w - z).exp()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchState {
    pub log_wa: Vec<f64>,
    pub log_wb: Vec<f64>,
    pub theta: f64,
    /// Index of the next observation, starting at 1.
    pub t: u64,
}

impl SwitchState {
    pub fn new(n_cl: usize, theta: f64) -> Result<Self> {
        if n_cl == 0 {
            return Err(Error::InvalidArgument(
                "need at least one classifier".into(),
            ));
        }
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "theta must lie in (0, 1), got {theta}"
            )));
        }
        let ln_n = (n_cl as f64).ln();
        Ok(Self {
            log_wa: vec![theta.ln() - ln_n; n_cl],
            log_wb: vec![(1.0 - theta).ln() - ln_n; n_cl],
            theta,
            t: 1,
        })
    }

    pub fn n_cl(&self) -> usize {
        self.log_wa.len()
    }

    /// Posterior over the classifier predicting the next observation.
    pub fn posterior(&self) -> Vec<f64> {
        let per: Vec<f64> = self
            .log_wa
            .iter()
            .zip(&self.log_wb)
            .map(|(&a, &b)| log_sum_exp(&[a, b]))
            .collect();
        normalized(&per)
    }

    /// Absorb one observation (or one minibatch, as a summed log-likelihood).
    pub fn update(&mut self, log_lik: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_cl();
        check_log_lik(log_lik, n)?;
        let mut wa: Vec<f64> = self
            .log_wa
            .iter()
            .zip(log_lik)
            .map(|(w, l)| w + l)
            .collect();
        let mut wb: Vec<f64> = self
            .log_wb
            .iter()
            .zip(log_lik)
            .map(|(w, l)| w + l)
            .collect();

        let total = log_sum_exp(&[log_sum_exp(&wa), log_sum_exp(&wb)]);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "observation {} has zero probability under every classifier",
                self.t
            )));
        }
        let sigma = 1.0 / (self.t as f64 + 1.0);
        let pooled = sigma.ln() + log_sum_exp(&wa);
        let ln_n = (n as f64).ln();
        let to_a = pooled + self.theta.ln() - ln_n;
        let to_b = pooled + (1.0 - self.theta).ln() - ln_n;
        let stay = (1.0 - sigma).ln();
        for j in 0..n {
            wa[j] = log_sum_exp(&[stay + wa[j], to_a]) - total;
            wb[j] = log_sum_exp(&[wb[j], to_b]) - total;
        }
        self.log_wa = wa;
        self.log_wb = wb;
        self.t += 1;
        Ok(self.posterior())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BmaState {
    /// Log-prior plus cumulative log-likelihood, per classifier.
    pub log_w: Vec<f64>,
}

impl BmaState {
    pub fn uniform(n_cl: usize) -> Result<Self> {
        if n_cl == 0 {
            return Err(Error::InvalidArgument(
                "need at least one classifier".into(),
            ));
        }
        Ok(Self {
            log_w: vec![-(n_cl as f64).ln(); n_cl],
        })
    }

    pub fn posterior(&self) -> Vec<f64> {
        normalized(&self.log_w)
    }

    pub fn update(&mut self, log_lik: &[f64]) -> Result<Vec<f64>> {
        check_log_lik(log_lik, self.log_w.len())?;
        let next: Vec<f64> = self.log_w.iter().zip(log_lik).map(|(w, l)| w + l).collect();
        let z = log_sum_exp(&next);
        if !z.is_finite() {
            return Err(Error::NonFinite(
                "every classifier assigns zero probability".into(),
            ));
        }
        // Renormalize so the weights stay O(1) over long runs.
        self.log_w = next.into_iter().map(|w| w - z).collect();
        Ok(self.posterior())
    }
}

/// Which posterior drives the mixture weights.
#[derive(Debug, Clone, PartialEq)]
pub enum Averaging {
    Switch(SwitchState),
    Bma(BmaState),
}

impl Averaging {
    pub fn switch(n_cl: usize, theta: f64) -> Result<Self> {
        Ok(Self::Switch(SwitchState::new(n_cl, theta)?))
    }

    pub fn bma(n_cl: usize) -> Result<Self> {
        Ok(Self::Bma(BmaState::uniform(n_cl)?))
    }

    pub fn posterior(&self) -> Vec<f64> {
        match self {
            Averaging::Switch(s) => s.posterior(),
            Averaging::Bma(b) => b.posterior(),
        }
    }

    pub fn update(&mut self, log_lik: &[f64]) -> Result<Vec<f64>> {
        match self {
            Averaging::Switch(s) => s.update(log_lik),
            Averaging::Bma(b) => b.update(log_lik),
        }
    }

    pub fn n_cl(&self) -> usize {
        match self {
            Averaging::Switch(s) => s.n_cl(),
            Averaging::Bma(b) => b.log_w.len(),
        }
    }
}

pub const ORACLE_MAX_T: usize = 8;
pub const ORACLE_MAX_N_CL: usize = 4;

/// Exact switch posterior by enumeration of every switch sequence.
///
/// `log_lik[t][j]` is the log-likelihood of observation `t + 1` under
/// classifier `j`. Segments start at observations `1 = u_1 < u_2 < ... <=
/// T + 1`; a boundary at observation `u` corresponds to switch time `u - 1`.
/// The prior of a sequence with segments `(u_i, j_i)`, `i = 1..L` is
///
/// ```text
/// prod_i (1 / n_cl)
///   * prod_{i < L} theta * pi_T(u_{i+1} - 1 | > u_i - 1)
///   * [(1 - theta) + theta * P(next switch time > T | > u_L - 1)]
/// ```
///
/// with `pi_T(t | > s) = (s + 1) / (t (t + 1))` and the horizon tail
/// `P(> T | > s) = (s + 1) / (T + 1)`.
pub fn switch_bruteforce_oracle(log_lik: &[Vec<f64>], n_cl: usize, theta: f64) -> Result<Vec<f64>> {
    let t_len = log_lik.len();
    if t_len > ORACLE_MAX_T || n_cl > ORACLE_MAX_N_CL || n_cl == 0 {
        return Err(Error::InvalidArgument(format!(
            "enumeration limited to T <= {ORACLE_MAX_T}, 1 <= n_cl <= {ORACLE_MAX_N_CL}; got T = {t_len}, n_cl = {n_cl}"
        )));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "theta must lie in (0, 1), got {theta}"
        )));
    }
    for row in log_lik {
        check_log_lik(row, n_cl)?;
    }
    let mut per_final: Vec<Vec<f64>> = vec![Vec::new(); n_cl];
    // Bit k of `mask` set means a segment starts at observation k + 2.
    for mask in 0u32..(1u32 << t_len) {
        let mut starts = vec![1usize];
        starts.extend((0..t_len).filter(|k| mask & (1 << k) != 0).map(|k| k + 2));
        let segs = starts.len();

        let mut log_prior = -(segs as f64) * (n_cl as f64).ln();
        for w in starts.windows(2) {
            let (prev, next) = ((w[0] - 1) as f64, (w[1] - 1) as f64);
            log_prior += theta.ln() + ((prev + 1.0) / (next * (next + 1.0))).ln();
        }
        let last = (starts[segs - 1] - 1) as f64;
        let tail = (last + 1.0) / (t_len as f64 + 1.0);
        log_prior += ((1.0 - theta) + theta * tail).ln();

        // Assign a classifier to every segment.
        let combos = n_cl.pow(segs as u32);
        for code in 0..combos {
            let mut models = Vec::with_capacity(segs);
            let mut c = code;
            for _ in 0..segs {
                models.push(c % n_cl);
                c /= n_cl;
            }
            let mut ll = 0.0;
            for (obs, row) in log_lik.iter().enumerate() {
                let u = obs + 1;
                let seg = starts
                    .iter()
                    .rposition(|&s| s <= u)
                    .expect("segment 0 starts at 1");
                ll += row[models[seg]];
            }
            per_final[models[segs - 1]].push(log_prior + ll);
        }
    }
    let per: Vec<f64> = per_final.iter().map(|v| log_sum_exp(v)).collect();
    Ok(normalized(&per))
}

/// One row of the posterior trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorRow {
    pub step: u64,
    pub t: u64,
    pub weights: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn run_switch(ll: &[Vec<f64>], n: usize, theta: f64) -> Vec<f64> {
        let mut s = SwitchState::new(n, theta).unwrap();
        let mut post = s.posterior();
        for row in ll {
            post = s.update(row).unwrap();
        }
        post
    }

    #[test]
    fn init_is_uniform_and_normalized() {
        assert_eq!(SwitchState::new(1, 0.999).unwrap().posterior(), vec![1.0]);
        let s = SwitchState::new(4, 0.999).unwrap();
        for p in s.posterior() {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
        }
        let mass: f64 = s.log_wa.iter().chain(&s.log_wb).map(|v| v.exp()).sum();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-15);
        assert!(SwitchState::new(3, 1.0).is_err());
        assert!(SwitchState::new(3, 0.0).is_err());
        assert!(SwitchState::new(0, 0.5).is_err());
    }

    #[test]
    fn identical_likelihoods_keep_uniform() {
        let mut s = SwitchState::new(3, 0.999).unwrap();
        for t in 0..500 {
            let l = -0.3 - (t % 7) as f64;
            for p in s.update(&[l, l, l]).unwrap() {
                assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn small_instance_matches_oracle() {
        let ll = vec![vec![-0.1, -2.0], vec![-0.1, -2.0], vec![-2.0, -0.1]];
        let dp = run_switch(&ll, 2, 0.999);
        let or = switch_bruteforce_oracle(&ll, 2, 0.999).unwrap();
        for (a, b) in dp.iter().zip(&or) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn consistently_better_classifier_dominates() {
        let mut s = SwitchState::new(2, 0.999).unwrap();
        let mut post = vec![];
        for _ in 0..5000 {
            post = s.update(&[-1.0, -0.9]).unwrap();
        }
        assert!(post[1] > 0.9, "{post:?}");
    }

    #[test]
    fn nan_rejected_neg_inf_allowed() {
        let mut s = SwitchState::new(2, 0.9).unwrap();
        assert!(s.update(&[f64::NAN, 0.0]).is_err());
        let p = s.update(&[f64::NEG_INFINITY, -1.0]).unwrap();
        // Only mass re-entering through a fresh switch reaches classifier 0.
        assert!(p[0] > 0.0 && p[0] < p[1]);
        assert!(s.update(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).is_err());
        assert!(s.update(&[0.0]).is_err());
    }

    #[test]
    fn bma_examples() {
        let mut b = BmaState::uniform(2).unwrap();
        let p = b.update(&[0.8f64.ln(), 0.2f64.ln()]).unwrap();
        assert_abs_diff_eq!(p[0], 0.8, epsilon = 1e-12);
        let p = b.update(&[0.8f64.ln(), 0.2f64.ln()]).unwrap();
        assert_abs_diff_eq!(p[0], 16.0 / 17.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 1.0 / 17.0, epsilon = 1e-12);
        let mut b = BmaState::uniform(3).unwrap();
        for _ in 0..1000 {
            let p = b.update(&[-2.0, -2.0, -2.0]).unwrap();
            assert_abs_diff_eq!(p[2], 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn oracle_edges() {
        assert_eq!(
            switch_bruteforce_oracle(&[], 3, 0.5).unwrap(),
            vec![1.0 / 3.0; 3]
        );
        let ll = vec![vec![-3.0]; 5];
        assert_eq!(switch_bruteforce_oracle(&ll, 1, 0.5).unwrap(), vec![1.0]);
        assert!(switch_bruteforce_oracle(&vec![vec![0.0, 0.0]; 9], 2, 0.5).is_err());
        assert!(switch_bruteforce_oracle(&[vec![0.0; 5]], 5, 0.5).is_err());
    }

    #[test]
    fn oracle_prior_sums_to_one() {
        // With zero log-likelihoods the enumerated mass equals the prior mass.
        for t in 0..=6 {
            for theta in [0.3, 0.999] {
                let ll = vec![vec![0.0, 0.0]; t];
                let post = switch_bruteforce_oracle(&ll, 2, theta).unwrap();
                assert_abs_diff_eq!(post.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn random_instances_match_oracle() {
        let mut rng = rng_from_seed(99);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let t = rng.random_range(0..=6);
            let n = rng.random_range(1..=3);
            let theta = if rng.random_bool(0.5) { 0.5 } else { 0.999 };
            let ll: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..n).map(|_| -rng.random_range(0.0..5.0)).collect())
                .collect();
            let dp = run_switch(&ll, n, theta);
            let or = switch_bruteforce_oracle(&ll, n, theta).unwrap();
            for (a, b) in dp.iter().zip(&or) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn switch_catches_up_faster_than_bma() {
        let mut s = SwitchState::new(2, DEFAULT_THETA).unwrap();
        let mut b = BmaState::uniform(2).unwrap();
        let (mut ps, mut pb) = (vec![], vec![]);
        for t in 0..200 {
            let ll = if t < 100 { [-0.2, -1.0] } else { [-1.0, -0.2] };
            ps = s.update(&ll).unwrap();
            pb = b.update(&ll).unwrap();
        }
        assert!(ps[1] > pb[1], "switch {ps:?} bma {pb:?}");
    }

    proptest! {
        #[test]
        fn posteriors_normalized(ll in prop::collection::vec(prop::collection::vec(-40.0f64..0.0, 3), 1..60)) {
            let mut s = SwitchState::new(3, 0.999).unwrap();
            let mut b = BmaState::uniform(3).unwrap();
            for row in &ll {
                let ps = s.update(row).unwrap();
                let pb = b.update(row).unwrap();
                prop_assert!(ps.iter().all(|&p| p >= 0.0));
                prop_assert!((ps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!((pb.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_equivariance(ll in prop::collection::vec(prop::collection::vec(-10.0f64..0.0, 3), 1..30)) {
            let perm = [2usize, 0, 1];
            let permuted: Vec<Vec<f64>> = ll.iter().map(|r| perm.iter().map(|&k| r[k]).collect()).collect();
            let a = run_switch(&ll, 3, 0.999);
            let b = run_switch(&permuted, 3, 0.999);
            for (i, &k) in perm.iter().enumerate() {
                prop_assert!((b[i] - a[k]).abs() < 1e-12);
            }
        }
    }
}
