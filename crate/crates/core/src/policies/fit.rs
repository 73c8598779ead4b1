use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reference::{EnsembleSource, EnsemblePolicy, MleReg, VARIANCE_FLOOR};
use crate::diffcore::{AdamConfig, MlpParams, OptimState};
use crate::envs::DemoDataset;
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softplus, LN_2PI};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadFamily {
    Gaussian,
    Laplace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub entropy_samples: usize,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            hidden: vec![64, 64],
            epochs: 1000,
            lr: 1e-3,
            batch_size: 256,
            weight_decay: 1e-6,
            entropy_samples: 10,
        }
    }
}

impl MleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Domain("clone.hidden widths must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Domain("clone.lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("clone.batch_size must be at least 1".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Domain("clone.weight_decay must be non-negative".into()));
        }
        if self.entropy_samples == 0 {
            return Err(Error::Domain("clone.entropy_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// Widths for a head network over `state_dim` inputs and `action_dim` actions.
    pub fn widths(&self, state_dim: usize, action_dim: usize) -> Vec<usize> {
        let mut w = vec![state_dim];
        w.extend_from_slice(&self.hidden);
        w.push(2 * action_dim);
        w
    }
}

/// Result of a likelihood fit. Log-likelihoods are per-sample means over
/// the full training set, without regularizers.
#[derive(Clone, Debug)]
pub struct MleFit {
    pub params: MlpParams,
    pub initial_log_likelihood: f64,
    pub final_log_likelihood: f64,
}

/// Maximum-likelihood Gaussian head with optional entropy bonus or Tikhonov
/// penalty. Returns the parameters after the final epoch.
pub fn fit_mle<R: Rng + ?Sized>(
    net: MlpParams,
    demos: &DemoDataset,
    reg: MleReg,
    config: &MleConfig,
    rng: &mut R,
) -> Result<MleFit> {
    let rows: Vec<usize> = (0..demos.len()).collect();
    fit_head(net, demos, &rows, HeadFamily::Gaussian, reg, None, config, rng)
}

/// Likelihood fit over the given demo rows. `dropout` enables inverted
/// dropout on hidden units during training.
#[allow(clippy::too_many_arguments)]
pub fn fit_head<R: Rng + ?Sized>(
    net: MlpParams,
    demos: &DemoDataset,
    rows: &[usize],
    family: HeadFamily,
    reg: MleReg,
    dropout: Option<f64>,
    config: &MleConfig,
    rng: &mut R,
) -> Result<MleFit> {
    fit_head_observed(net, demos, rows, family, reg, dropout, config, rng, &mut |_, _| Ok(()))
}

/// `fit_head` calling `observe(epoch, params)` after every epoch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_head_observed<R: Rng + ?Sized>(
    mut net: MlpParams,
    demos: &DemoDataset,
    rows: &[usize],
    family: HeadFamily,
    reg: MleReg,
    dropout: Option<f64>,
    config: &MleConfig,
    rng: &mut R,
    observe: &mut dyn FnMut(usize, &MlpParams) -> Result<()>,
) -> Result<MleFit> {
    config.validate()?;
    if rows.is_empty() {
        return Err(Error::Domain("likelihood fit needs at least one demonstration".into()));
    }
    if net.input_dim() != demos.state_dim() {
        return Err(Error::dim("head network input", demos.state_dim(), net.input_dim()));
    }
    if net.output_dim() != 2 * demos.action_dim() {
        return Err(Error::dim("head network output", 2 * demos.action_dim(), net.output_dim()));
    }
    if let MleReg::Entropy { beta } | MleReg::Tikhonov { lambda: beta } = reg {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::Domain("regularization strength must be non-negative".into()));
        }
    }
    let states = demos.states().transpose();
    let actions = demos.actions().transpose();
    let select = |m: &DMatrix<f64>, idx: &[usize]| DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])]);
    let all_s = select(&states, rows);
    let all_a = select(&actions, rows);

    let initial = head_log_likelihood(&net, &all_s, &all_a, family)?;
    let mut opt = OptimState::for_params(AdamConfig::with_lr(config.lr), &net);
    // L2 coefficient: Tikhonov λψᵀψ plus weight decay wd·ψᵀψ/2.
    let l2 = match reg {
        MleReg::Tikhonov { lambda } => lambda,
        _ => 0.0,
    } + 0.5 * config.weight_decay;
    let beta = match reg {
        MleReg::Entropy { beta } => beta,
        _ => 0.0,
    };
    let mut order = rows.to_vec();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let s = select(&states, chunk);
            let a = select(&actions, chunk);
            let cache = match dropout {
                Some(p) => net.forward_cached_dropout(&s, p, rng)?,
                None => net.forward_cached(&s)?,
            };
            let (loss, up) = head_loss_grad(cache.output(), &a, family, beta, config.entropy_samples, rng);
            if !loss.is_finite() {
                return Err(Error::Overflow {
                    context: "behavioral likelihood loss".into(),
                    norm: loss,
                });
            }
            let (mut grads, _) = net.backward_batch(&cache, &up)?;
            if l2 > 0.0 {
                grads.add_scaled_params(&net, 2.0 * l2);
            }
            opt.step(&mut net, &grads)?;
        }
        observe(epoch + 1, &net)?;
    }
    let final_ll = head_log_likelihood(&net, &all_s, &all_a, family)?;
    Ok(MleFit {
        params: net,
        initial_log_likelihood: initial,
        final_log_likelihood: final_ll,
    })
}

/// Mean negative log-likelihood (minus β·entropy estimate) and its gradient
/// with respect to the 2k head outputs, already divided by the batch size.
fn head_loss_grad<R: Rng + ?Sized>(
    out: &DMatrix<f64>,
    actions: &DMatrix<f64>,
    family: HeadFamily,
    beta: f64,
    entropy_samples: usize,
    rng: &mut R,
) -> (f64, DMatrix<f64>) {
    let k = actions.nrows();
    let b = actions.ncols();
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut up = DMatrix::zeros(2 * k, b);
    for c in 0..b {
        for i in 0..k {
            let (mu, raw) = (out[(i, c)], out[(k + i, c)]);
            let v = softplus(raw) + VARIANCE_FLOOR;
            let dv_draw = sigmoid(raw);
            let r = actions[(i, c)] - mu;
            match family {
                HeadFamily::Gaussian => {
                    loss += 0.5 * (LN_2PI + v.ln() + r * r / v);
                    up[(i, c)] = -r / v * inv_b;
                    let mut dv = 0.5 / v - 0.5 * r * r / (v * v);
                    if beta > 0.0 {
                        // Reparameterized entropy estimate; the noise terms of
                        // its gradient cancel, leaving ∂H/∂v = 1/(2v).
                        let mean_sq: f64 = (0..entropy_samples)
                            .map(|_| {
                                let e: f64 = rng.sample(rand_distr::StandardNormal);
                                e * e
                            })
                            .sum::<f64>()
                            / entropy_samples as f64;
                        loss -= beta * 0.5 * (LN_2PI + v.ln() + mean_sq);
                        dv -= beta * 0.5 / v;
                    }
                    up[(k + i, c)] = dv * dv_draw * inv_b;
                }
                HeadFamily::Laplace => {
                    let s = v.sqrt();
                    loss += (2.0 * s).ln() + r.abs() / s;
                    up[(i, c)] = -r.signum() / s * inv_b;
                    let ds = 1.0 / s - r.abs() / (s * s);
                    up[(k + i, c)] = ds * dv_draw / (2.0 * s) * inv_b;
                }
            }
        }
    }
    (loss * inv_b, up)
}

/// Mean per-sample log-likelihood of the head over columns of `states`/`actions`.
pub fn head_log_likelihood(
    net: &MlpParams,
    states: &DMatrix<f64>,
    actions: &DMatrix<f64>,
    family: HeadFamily,
) -> Result<f64> {
    let out = net.forward_batch(states)?;
    let k = actions.nrows();
    let mut total = 0.0;
    for c in 0..actions.ncols() {
        for i in 0..k {
            let v = softplus(out[(k + i, c)]) + VARIANCE_FLOOR;
            let r = actions[(i, c)] - out[(i, c)];
            total += match family {
                HeadFamily::Gaussian => -0.5 * (LN_2PI + v.ln() + r * r / v),
                HeadFamily::Laplace => -(2.0 * v.sqrt()).ln() - r.abs() / v.sqrt(),
            };
        }
    }
    Ok(total / actions.ncols().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub train_fraction: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: 15,
            train_fraction: 0.8,
        }
    }
}

/// Deep ensemble: each member gets its own seed and its own random
/// train/validation split; only the training part is fitted.
pub fn fit_ensemble(
    demos: &DemoDataset,
    config: &MleConfig,
    ensemble: &EnsembleConfig,
    seed: u64,
) -> Result<EnsemblePolicy> {
    if ensemble.members == 0 {
        return Err(Error::Domain("ensemble needs at least one member".into()));
    }
    if !(ensemble.train_fraction > 0.0 && ensemble.train_fraction <= 1.0) {
        return Err(Error::Domain("ensemble train fraction must lie in (0, 1]".into()));
    }
    let widths = config.widths(demos.state_dim(), demos.action_dim());
    let mut members = Vec::with_capacity(ensemble.members);
    for m in 0..ensemble.members {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + m as u64));
        let mut rows: Vec<usize> = (0..demos.len()).collect();
        rows.shuffle(&mut rng);
        let keep = ((demos.len() as f64 * ensemble.train_fraction).round() as usize).clamp(1, demos.len());
        rows.truncate(keep);
        rows.sort_unstable();
        let net = MlpParams::new(&widths, &mut rng)?;
        let fit = fit_head(net, demos, &rows, HeadFamily::Gaussian, MleReg::None, None, config, &mut rng)?;
        members.push(fit.params);
    }
    EnsemblePolicy::new(members, EnsembleSource::Members)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutConfig {
    pub drop_prob: f64,
    pub masks: usize,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            drop_prob: 0.1,
            masks: 15,
        }
    }
}

/// Trains one network with dropout, then freezes `masks` random dropout
/// masks as ensemble members.
pub fn fit_mc_dropout(
    demos: &DemoDataset,
    config: &MleConfig,
    dropout: &DropoutConfig,
    seed: u64,
) -> Result<EnsemblePolicy> {
    let p = dropout.drop_prob;
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!("dropout probability {p} outside [0, 1)")));
    }
    if dropout.masks == 0 {
        return Err(Error::Domain("mc-dropout needs at least one mask".into()));
    }
    if config.hidden.is_empty() {
        return Err(Error::Domain("mc-dropout needs at least one hidden layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = MlpParams::new(&config.widths(demos.state_dim(), demos.action_dim()), &mut rng)?;
    let rows: Vec<usize> = (0..demos.len()).collect();
    let fit = fit_head(net, demos, &rows, HeadFamily::Gaussian, MleReg::None, Some(p), config, &mut rng)?;
    let members = (0..dropout.masks)
        .map(|_| {
            let masks: Vec<Vec<bool>> = config
                .hidden
                .iter()
                .map(|&w| (0..w).map(|_| rng.random::<f64>() >= p).collect())
                .collect();
            fit.params.with_hidden_mask(&masks, p)
        })
        .collect::<Result<Vec<_>>>()?;
    EnsemblePolicy::new(members, EnsembleSource::Dropout { drop_prob: p })
}
