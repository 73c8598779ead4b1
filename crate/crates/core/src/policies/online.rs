use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ForwardCache, GradBuffer, MlpParams};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::numeric::{log_sech2, LN_2PI};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
const MAX_TANH: f64 = 1.0 - f64::EPSILON;

/// Reparameterized Gaussian actor, optionally squashed into the action box
/// by `a = center + half · tanh(μ + σε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OnlineRecord", into = "OnlineRecord")]
pub struct OnlinePolicy {
    net: MlpParams,
    center: Vec<f64>,
    half: Vec<f64>,
    squash: bool,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OnlineRecord {
    net: MlpParams,
    center: Vec<f64>,
    half: Vec<f64>,
    squash: bool,
}

impl From<OnlinePolicy> for OnlineRecord {
    fn from(p: OnlinePolicy) -> Self {
        OnlineRecord {
            net: p.net,
            center: p.center,
            half: p.half,
            squash: p.squash,
        }
    }
}

impl TryFrom<OnlineRecord> for OnlinePolicy {
    type Error = Error;

    fn try_from(r: OnlineRecord) -> Result<Self> {
        OnlinePolicy::from_parts(r.net, r.center, r.half, r.squash)
    }
}

/// Everything the loss assembly needs about one batch of reparameterized
/// samples. All matrices are action-dim × batch.
#[derive(Clone, Debug)]
pub struct OnlineBatch {
    cache: ForwardCache,
    log_std_active: DMatrix<f64>,
    pub mean: DMatrix<f64>,
    pub log_std: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub log_prob: Vec<f64>,
    /// `∂ log π(a|s) / ∂a` at fixed parameters.
    pub dlogp_da: DMatrix<f64>,
    /// Pathwise `∂a/∂μ` and `∂a/∂log σ` at fixed noise.
    pub da_dmean: DMatrix<f64>,
    pub da_dlog_std: DMatrix<f64>,
    /// `∂ log π(a|s) / ∂μ` and `∂/∂log σ` with the action held fixed.
    pub dlogp_dmean: DMatrix<f64>,
    pub dlogp_dlog_std: DMatrix<f64>,
}

impl OnlineBatch {
    pub fn len(&self) -> usize {
        self.log_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_prob.is_empty()
    }

    pub fn states(&self) -> &DMatrix<f64> {
        self.cache.input()
    }
}

impl OnlinePolicy {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        center: Vec<f64>,
        half: Vec<f64>,
        hidden: &[usize],
        squash: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![state_dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * center.len());
        Self::from_parts(MlpParams::new(&widths, rng)?, center, half, squash)
    }

    pub fn for_env<R: Rng + ?Sized>(
        spec: &EnvSpec,
        hidden: &[usize],
        squash: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (center, half) = spec.action_center_half();
        Self::new(spec.state_dim(), center, half, hidden, squash, rng)
    }

    pub fn from_parts(net: MlpParams, center: Vec<f64>, half: Vec<f64>, squash: bool) -> Result<Self> {
        let k = center.len();
        if k == 0 {
            return Err(Error::Domain("online policy needs an action dimension".into()));
        }
        if half.len() != k {
            return Err(Error::dim("action half-widths", k, half.len()));
        }
        if net.output_dim() != 2 * k {
            return Err(Error::dim("online policy output", 2 * k, net.output_dim()));
        }
        if half.iter().any(|h| !(h.is_finite() && *h > 0.0)) || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("action box must be finite with positive width".into()));
        }
        Ok(OnlinePolicy {
            net,
            center,
            half,
            squash,
        })
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpParams {
        &mut self.net
    }

    pub fn squash(&self) -> bool {
        self.squash
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.center.len()
    }

    pub fn action_center(&self) -> &[f64] {
        &self.center
    }

    pub fn action_half(&self) -> &[f64] {
        &self.half
    }

    /// Pre-squash mean and clamped log-std at one state.
    pub fn head(&self, s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.net.forward(s)?;
        let k = self.action_dim();
        let ls = out[k..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok((out[..k].to_vec(), ls))
    }

    /// Reparameterized sample and its log-density.
    pub fn sample(&self, s: &[f64], noise: &[f64]) -> Result<(Vec<f64>, f64)> {
        if noise.len() != self.action_dim() {
            return Err(Error::dim("policy noise", self.action_dim(), noise.len()));
        }
        let x = DMatrix::from_column_slice(s.len(), 1, s);
        let e = DMatrix::from_column_slice(noise.len(), 1, noise);
        let b = self.sample_batch(&x, &e)?;
        Ok((b.actions.as_slice().to_vec(), b.log_prob[0]))
    }

    /// Deterministic mode (zero noise).
    pub fn act_deterministic(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.sample(s, &vec![0.0; self.action_dim()])?.0)
    }

    /// Stochastic action with freshly drawn standard-normal noise.
    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let noise: Vec<f64> = (0..self.action_dim())
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        Ok(self.sample(s, &noise)?.0)
    }

    /// Samples for the columns of `states` (d × B) with noise (k × B).
    pub fn sample_batch(&self, states: &DMatrix<f64>, noise: &DMatrix<f64>) -> Result<OnlineBatch> {
        let k = self.action_dim();
        let bsz = states.ncols();
        if noise.nrows() != k || noise.ncols() != bsz {
            return Err(Error::dim("policy noise rows", k, noise.nrows()));
        }
        let cache = self.net.forward_cached(states)?;
        let out = cache.output();
        let mean = out.rows(0, k).into_owned();
        let raw_ls = out.rows(k, k);
        let log_std = raw_ls.map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let log_std_active = raw_ls.map(|v| if (LOG_STD_MIN..=LOG_STD_MAX).contains(&v) { 1.0 } else { 0.0 });

        let mut actions = DMatrix::zeros(k, bsz);
        let mut dlogp_da = DMatrix::zeros(k, bsz);
        let mut da_dmean = DMatrix::zeros(k, bsz);
        let mut da_dlog_std = DMatrix::zeros(k, bsz);
        let mut dlogp_dmean = DMatrix::zeros(k, bsz);
        let mut dlogp_dlog_std = DMatrix::zeros(k, bsz);
        let mut log_prob = vec![0.0; bsz];
        for c in 0..bsz {
            let mut lp = 0.0;
            for i in 0..k {
                let (mu, ls, eps) = (mean[(i, c)], log_std[(i, c)], noise[(i, c)]);
                let sigma = ls.exp();
                let u = mu + sigma * eps;
                let base = -0.5 * (LN_2PI + eps * eps) - ls;
                dlogp_dmean[(i, c)] = eps / sigma;
                dlogp_dlog_std[(i, c)] = eps * eps - 1.0;
                if self.squash {
                    let h = self.half[i];
                    let t = u.tanh().clamp(-MAX_TANH, MAX_TANH);
                    let ls2 = log_sech2(u);
                    let sech2 = ls2.exp();
                    actions[(i, c)] = self.center[i] + h * t;
                    lp += base - h.ln() - ls2;
                    dlogp_da[(i, c)] = (-eps / sigma + 2.0 * t) / (h * sech2);
                    da_dmean[(i, c)] = h * sech2;
                    da_dlog_std[(i, c)] = h * sech2 * sigma * eps;
                } else {
                    actions[(i, c)] = u;
                    lp += base;
                    dlogp_da[(i, c)] = -eps / sigma;
                    da_dmean[(i, c)] = 1.0;
                    da_dlog_std[(i, c)] = sigma * eps;
                }
            }
            log_prob[c] = lp;
        }
        Ok(OnlineBatch {
            cache,
            log_std_active,
            mean,
            log_std,
            noise: noise.clone(),
            actions,
            log_prob,
            dlogp_da,
            da_dmean,
            da_dlog_std,
            dlogp_dmean,
            dlogp_dlog_std,
        })
    }

    /// Parameter gradient given upstream gradients on the head outputs
    /// (k × B each). The log-std clamp passes no gradient when active.
    pub fn backward(
        &self,
        batch: &OnlineBatch,
        g_mean: &DMatrix<f64>,
        g_log_std: &DMatrix<f64>,
    ) -> Result<GradBuffer> {
        let k = self.action_dim();
        let bsz = batch.len();
        let shape = (k, bsz);
        if g_mean.shape() != shape || g_log_std.shape() != shape {
            return Err(Error::dim("head gradient columns", bsz, g_mean.ncols()));
        }
        let mut up = DMatrix::zeros(2 * k, bsz);
        up.rows_mut(0, k).copy_from(g_mean);
        up.rows_mut(k, k).copy_from(&g_log_std.component_mul(&batch.log_std_active));
        Ok(self.net.backward_batch(&batch.cache, &up)?.0)
    }

    /// Log-density of a given action.
    pub fn log_density(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        if a.len() != self.action_dim() {
            return Err(Error::dim("policy action", self.action_dim(), a.len()));
        }
        let (mu, ls) = self.head(s)?;
        let mut lp = 0.0;
        for i in 0..self.action_dim() {
            let u = if self.squash {
                let t = (a[i] - self.center[i]) / self.half[i];
                if !(t.abs() < 1.0) {
                    return Err(Error::Domain(format!("action {} outside the open action box", a[i])));
                }
                lp -= self.half[i].ln() + (-t).ln_1p() + t.ln_1p();
                t.atanh()
            } else {
                a[i]
            };
            let z = (u - mu[i]) / ls[i].exp();
            lp += -0.5 * (LN_2PI + z * z) - ls[i];
        }
        Ok(lp)
    }
}
