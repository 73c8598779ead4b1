use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::kernel::{KernelKind, KernelSpec};
use super::lml::log_marginal_likelihood;
use super::posterior::{standardization, GpPosterior};
use crate::diffcore::{AdamConfig, OptimState};
use crate::envs::DemoDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpFitConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Lower bound on σ_n² (standardized units) during optimization.
    pub noise_floor: f64,
    pub init_noise_variance: f64,
    /// Hyperparameters are fitted on at most this many evenly strided
    /// points; the posterior always conditions on the full set.
    pub max_fit_points: usize,
    /// One optimization run per entry, starting from this multiple of each
    /// input dimension's spread; the most likely result wins.
    pub lengthscale_inits: Vec<f64>,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        GpFitConfig {
            lr: 0.1,
            epochs: 500,
            noise_floor: 1e-6,
            init_noise_variance: 0.1,
            max_fit_points: 300,
            lengthscale_inits: vec![1.0, 0.2],
        }
    }
}

impl GpFitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Domain("gp.lr must be positive".into()));
        }
        if !(self.noise_floor.is_finite() && self.noise_floor > 0.0) {
            return Err(Error::Domain("gp.noise_floor must be positive".into()));
        }
        if !(self.init_noise_variance.is_finite() && self.init_noise_variance > 0.0) {
            return Err(Error::Domain("gp.init_noise_variance must be positive".into()));
        }
        if self.max_fit_points == 0 {
            return Err(Error::Domain("gp.max_fit_points must be at least 1".into()));
        }
        if self.lengthscale_inits.is_empty() || self.lengthscale_inits.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::Domain("gp.lengthscale_inits must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Maximizes the log marginal likelihood over log-hyperparameters with Adam.
/// `inputs` is d × N. Returns the best kernel visited.
pub fn fit_kernel(
    kind: KernelKind,
    inputs: &DMatrix<f64>,
    y: &DVector<f64>,
    config: &GpFitConfig,
) -> Result<KernelSpec> {
    config.validate()?;
    let d = inputs.nrows();
    let spread: Vec<f64> = (0..d)
        .map(|r| {
            let row = inputs.row(r);
            let n = row.len().max(1) as f64;
            let m = row.sum() / n;
            let sd = (row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            if sd > 1e-3 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for factor in &config.lengthscale_inits {
        let init_ls = spread.iter().map(|s| s * factor).collect();
        let init = KernelSpec::new(kind, init_ls, 1.0, config.init_noise_variance.max(config.noise_floor))?;
        let run = ascend(kind, init.log_params(), inputs, y, config)?;
        if best.as_ref().is_none_or(|(v, _)| run.0 > *v) {
            best = Some(run);
        }
    }
    let (_, p) = best.expect("at least one start");
    Ok(KernelSpec::from_log_params(kind, &p))
}

/// Adam ascent from `params`; returns the best value and parameters visited.
fn ascend(
    kind: KernelKind,
    mut params: Vec<f64>,
    inputs: &DMatrix<f64>,
    y: &DVector<f64>,
    config: &GpFitConfig,
) -> Result<(f64, Vec<f64>)> {
    let floor = config.noise_floor.ln();
    let mut opt = OptimState::new(AdamConfig::with_lr(config.lr), params.len());
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..=config.epochs {
        let spec = KernelSpec::from_log_params(kind, &params);
        let lml = log_marginal_likelihood(&spec, inputs, y)?;
        if best.as_ref().is_none_or(|(v, _)| lml.value > *v) {
            best = Some((lml.value, params.clone()));
        }
        if opt.step_count() as usize == config.epochs {
            break;
        }
        let neg: Vec<f64> = lml.grad.iter().map(|g| -g).collect();
        opt.step_flat(&mut params, &neg)?;
        let last = params.len() - 1;
        params[last] = params[last].max(floor);
        // Keep the search inside a range where the Gram matrix stays usable.
        for p in params.iter_mut() {
            *p = p.clamp(-20.0, 20.0);
        }
    }
    Ok(best.expect("at least one evaluation"))
}

/// Fits one GP per action column of `actions` (N × k) over `states` (N × d).
pub fn fit_posterior(
    states: &DMatrix<f64>,
    actions: &DMatrix<f64>,
    kind: KernelKind,
    config: &GpFitConfig,
) -> Result<GpPosterior> {
    let n = states.nrows();
    if n == 0 {
        return Err(Error::Domain("gp needs at least one demonstration state".into()));
    }
    if actions.nrows() != n {
        return Err(Error::dim("gp training actions", n, actions.nrows()));
    }
    let (mean, scale) = standardization(actions);
    let idx = strided(n, config.max_fit_points);
    let inputs = DMatrix::from_fn(states.ncols(), idx.len(), |r, c| states[(idx[c], r)]);
    let mut kernels = Vec::with_capacity(actions.ncols());
    for j in 0..actions.ncols() {
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| (actions[(i, j)] - mean[j]) / scale[j]));
        kernels.push(fit_kernel(kind, &inputs, &y, config)?);
    }
    GpPosterior::condition_with(kernels, states, actions, mean, scale)
}

pub fn gp_fit(demos: &DemoDataset, kind: KernelKind, config: &GpFitConfig) -> Result<GpPosterior> {
    fit_posterior(demos.states(), demos.actions(), kind, config)
}

fn strided(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}
