//! KL divergences to the reference policy and the regularized policy loss.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::GradBuffer;
use crate::error::{Error, Result};
use crate::numeric::mean_and_stderr;
use crate::policies::{OnlinePolicy, RefEval, RefPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlEstimator {
    ClosedForm,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub estimator: KlEstimator,
    pub samples: usize,
    /// Standard error of the mean; `None` for closed-form values.
    pub std_error: Option<f64>,
}

/// `Σ_d [log(σ₀/σ) + (σ² + (μ−μ₀)²)/(2σ₀²) − ½]`.
pub fn kl_gaussian_diag(mu: &[f64], var: &[f64], mu0: &[f64], var0: &[f64]) -> Result<f64> {
    let k = mu.len();
    for (name, len) in [("variance", var.len()), ("reference mean", mu0.len()), ("reference variance", var0.len())] {
        if len != k {
            return Err(Error::Domain(format!("{name} has {len} entries, expected {k}")));
        }
    }
    if var.iter().chain(var0).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Domain("kl needs strictly positive variances".into()));
    }
    let kl: f64 = (0..k)
        .map(|i| {
            let d = mu[i] - mu0[i];
            0.5 * (var0[i] / var[i]).ln() + (var[i] + d * d) / (2.0 * var0[i]) - 0.5
        })
        .sum();
    // Rounding can leave a hair below zero for coinciding moments.
    Ok(kl.max(0.0))
}

/// Closed-form KL for an unsquashed online policy against a Gaussian-moment
/// reference.
pub fn kl_closed_form(online: &OnlinePolicy, reference: &RefPolicy, s: &[f64]) -> Result<KlEstimate> {
    if online.squash() {
        return Err(Error::Domain("closed-form kl needs an unsquashed online policy".into()));
    }
    let (mu, ls) = online.head(s)?;
    let var: Vec<f64> = ls.iter().map(|l| (2.0 * l).exp()).collect();
    let (mu0, var0) = reference.moments(s)?;
    Ok(KlEstimate {
        value: kl_gaussian_diag(&mu, &var, &mu0, &var0)?,
        estimator: KlEstimator::ClosedForm,
        samples: 0,
        std_error: None,
    })
}

/// Monte-Carlo estimate of `E_{a∼π_φ}[log π_φ(a|s) − log π₀(a|s)]`.
pub fn kl_mc(
    online: &OnlinePolicy,
    reference: &RefPolicy,
    s: &[f64],
    n: usize,
    seed: u64,
) -> Result<KlEstimate> {
    if n == 0 {
        return Err(Error::Domain("kl estimate needs at least one sample".into()));
    }
    let k = online.action_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = DMatrix::from_fn(s.len(), n, |r, _| s[r]);
    let noise = DMatrix::from_fn(k, n, |_, _| rng.sample(StandardNormal));
    let batch = online.sample_batch(&states, &noise)?;
    let eval = reference.evaluate_batch(&states, &batch.actions)?;
    let terms: Vec<f64> = batch.log_prob.iter().zip(&eval.log_density).map(|(a, b)| a - b).collect();
    if let Some(c) = terms.iter().position(|t| !t.is_finite()) {
        return Err(overflow("kl estimate", &eval, &states, c));
    }
    let (value, se) = mean_and_stderr(&terms);
    Ok(KlEstimate {
        value,
        estimator: KlEstimator::MonteCarlo,
        samples: n,
        std_error: Some(se),
    })
}

/// Access to the critic ensemble used by the policy loss.
pub trait QFunction {
    /// `min(Q₁, Q₂)` for each column of `actions` and its action gradient
    /// (action-dim × batch).
    fn q_min_and_grad(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)>;
}

/// The zero function; turns the policy loss into the pure KL objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroCritic;

impl QFunction for ZeroCritic {
    fn q_min_and_grad(&self, _states: &DMatrix<f64>, actions: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        Ok((vec![0.0; actions.ncols()], DMatrix::zeros(actions.nrows(), actions.ncols())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDiagnostics {
    /// Batch mean of the single-sample `log π_φ − log π₀`.
    pub kl_mean: f64,
    pub q_mean: f64,
    pub grad_mean_abs: f64,
    pub grad_l2: f64,
    /// Mean `|∇_a log π₀|` over batch and action dimensions.
    pub ref_grad_mean_abs: f64,
    pub min_ref_variance: f64,
}

#[derive(Clone, Debug)]
pub struct PolicyStep {
    pub loss: f64,
    pub grads: GradBuffer,
    pub diagnostics: PolicyDiagnostics,
}

/// Policy loss with freshly drawn reparameterization noise.
pub fn policy_loss_and_grad<Q: QFunction + ?Sized, R: Rng + ?Sized>(
    online: &OnlinePolicy,
    reference: &RefPolicy,
    critic: &Q,
    states: &DMatrix<f64>,
    alpha: f64,
    rng: &mut R,
) -> Result<PolicyStep> {
    let noise = DMatrix::from_fn(online.action_dim(), states.ncols(), |_, _| rng.sample(StandardNormal));
    policy_loss_and_grad_with_noise(online, reference, critic, states, &noise, alpha)
}

/// `mean[α(log π_φ(a|s) − log π₀(a|s)) − Q_min(s,a)]` with `a = f_φ(ε;s)` and
/// its parameter gradient
/// `(α∇_a log π_φ − α∇_a log π₀ − ∇_a Q)·∇_φ f_φ + α∇_φ log π_φ`.
pub fn policy_loss_and_grad_with_noise<Q: QFunction + ?Sized>(
    online: &OnlinePolicy,
    reference: &RefPolicy,
    critic: &Q,
    states: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    alpha: f64,
) -> Result<PolicyStep> {
    if states.ncols() == 0 {
        return Err(Error::Domain("policy loss needs a non-empty batch".into()));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Domain(format!("kl temperature must be non-negative, got {alpha}")));
    }
    let batch = online.sample_batch(states, noise)?;
    let eval = reference.evaluate_batch(states, &batch.actions)?;
    let (q, dq) = critic.q_min_and_grad(states, &batch.actions)?;
    let b = states.ncols();
    let k = online.action_dim();
    let inv_b = 1.0 / b as f64;

    let mut loss = 0.0;
    let mut kl = 0.0;
    let mut g_mean = DMatrix::zeros(k, b);
    let mut g_log_std = DMatrix::zeros(k, b);
    for c in 0..b {
        let term = batch.log_prob[c] - eval.log_density[c];
        if !term.is_finite() || !q[c].is_finite() {
            return Err(overflow("policy loss", &eval, states, c));
        }
        kl += term;
        loss += alpha * term - q[c];
        for i in 0..k {
            let ga = alpha * batch.dlogp_da[(i, c)] - alpha * eval.grad[(i, c)] - dq[(i, c)];
            g_mean[(i, c)] = (ga * batch.da_dmean[(i, c)] + alpha * batch.dlogp_dmean[(i, c)]) * inv_b;
            g_log_std[(i, c)] = (ga * batch.da_dlog_std[(i, c)] + alpha * batch.dlogp_dlog_std[(i, c)]) * inv_b;
            if !(g_mean[(i, c)].is_finite() && g_log_std[(i, c)].is_finite()) {
                return Err(overflow("policy gradient", &eval, states, c));
            }
        }
    }
    let grads = online.backward(&batch, &g_mean, &g_log_std)?;
    if !grads.is_finite() {
        let worst = worst_column(&eval);
        return Err(overflow("policy gradient", &eval, states, worst));
    }
    let diagnostics = PolicyDiagnostics {
        kl_mean: kl * inv_b,
        q_mean: q.iter().sum::<f64>() * inv_b,
        grad_mean_abs: grads.mean_abs(),
        grad_l2: grads.l2_norm(),
        ref_grad_mean_abs: eval.grad.iter().map(|g| g.abs()).sum::<f64>() / (k * b) as f64,
        min_ref_variance: eval.variance.min(),
    };
    Ok(PolicyStep {
        loss: loss * inv_b,
        grads,
        diagnostics,
    })
}

/// Single-sample reparameterized `mean_s KL(π_φ(·|s) ‖ π₀(·|s))` over demo
/// states and its gradient.
pub fn pretrain_loss_and_grad<R: Rng + ?Sized>(
    online: &OnlinePolicy,
    reference: &RefPolicy,
    states: &DMatrix<f64>,
    rng: &mut R,
) -> Result<PolicyStep> {
    policy_loss_and_grad(online, reference, &ZeroCritic, states, 1.0, rng)
}

fn worst_column(eval: &RefEval) -> usize {
    (0..eval.variance.ncols())
        .min_by(|&a, &b| {
            let va = eval.variance.column(a).min();
            let vb = eval.variance.column(b).min();
            va.total_cmp(&vb)
        })
        .unwrap_or(0)
}

fn overflow(context: &'static str, eval: &RefEval, states: &DMatrix<f64>, c: usize) -> Error {
    Error::KlOverflow {
        context,
        ref_variance: eval.variance.column(c).min(),
        state: states.column(c).iter().copied().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_gaussians_have_zero_kl() {
        assert_eq!(kl_gaussian_diag(&[0.3, -1.0], &[0.5, 2.0], &[0.3, -1.0], &[0.5, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn small_reference_variance_blows_up() {
        let v = kl_gaussian_diag(&[0.0], &[1.0], &[0.0], &[1e-3]).unwrap();
        let expected = 0.5 * (1e3 - 1.0 + (1e-3f64).ln());
        assert!((v - expected).abs() < 1e-9);
        assert!((v - 496.05).abs() < 0.01);
    }

    #[test]
    fn rejects_non_positive_variance() {
        assert!(matches!(kl_gaussian_diag(&[0.0], &[0.0], &[0.0], &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(kl_gaussian_diag(&[0.0], &[1.0], &[0.0], &[-1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn tenfold_variance_drop_gap_scales_inversely() {
        let gap = |c: f64| {
            kl_gaussian_diag(&[0.5], &[0.01], &[0.0], &[c / 10.0]).unwrap()
                - kl_gaussian_diag(&[0.5], &[0.01], &[0.0], &[c]).unwrap()
        };
        let (g1, g2) = (gap(1e-2), gap(1e-3));
        // Dominated by (σ²+Δ²)(10−1)/(2c), so the gap grows like 1/c.
        assert!((g2 / g1 - 10.0).abs() < 0.5, "{}", g2 / g1);
    }
}
