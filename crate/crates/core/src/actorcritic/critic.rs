use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::replay::TransitionBatch;
use crate::diffcore::{GradBuffer, MlpParams};
use crate::error::{Error, Result};
use crate::klreg::QFunction;
use crate::policies::{OnlinePolicy, RefPolicy};

/// Twin Q-networks over `state ‖ action` with slowly tracking targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticPair {
    pub live: [MlpParams; 2],
    pub target: [MlpParams; 2],
}

impl CriticPair {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut widths = vec![state_dim + action_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let q1 = MlpParams::new(&widths, rng)?;
        let q2 = MlpParams::new(&widths, rng)?;
        Ok(CriticPair {
            target: [q1.clone(), q2.clone()],
            live: [q1, q2],
        })
    }

    pub fn from_live(live: [MlpParams; 2]) -> Result<Self> {
        if live[0].widths() != live[1].widths() || live[0].output_dim() != 1 {
            return Err(Error::Domain("critics must share widths and have scalar output".into()));
        }
        Ok(CriticPair {
            target: live.clone(),
            live,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.live[0].input_dim()
    }

    /// Live critic values for columns of `states` and `actions`.
    pub fn q_values(&self, which: usize, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self.live[which].forward_batch(&stack(states, actions)?)?.as_slice().to_vec())
    }

    pub fn target_min(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> Result<Vec<f64>> {
        let x = stack(states, actions)?;
        let a = self.target[0].forward_batch(&x)?;
        let b = self.target[1].forward_batch(&x)?;
        Ok(a.iter().zip(b.iter()).map(|(x, y)| x.min(*y)).collect())
    }
}

impl QFunction for CriticPair {
    fn q_min_and_grad(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let x = stack(states, actions)?;
        let d = states.nrows();
        let k = actions.nrows();
        let b = x.ncols();
        let c1 = self.live[0].forward_cached(&x)?;
        let c2 = self.live[1].forward_cached(&x)?;
        let (q1, q2) = (c1.output(), c2.output());
        let pick_first: Vec<bool> = (0..b).map(|c| q1[(0, c)] <= q2[(0, c)]).collect();
        let q: Vec<f64> = (0..b).map(|c| if pick_first[c] { q1[(0, c)] } else { q2[(0, c)] }).collect();
        let up1 = DMatrix::from_fn(1, b, |_, c| if pick_first[c] { 1.0 } else { 0.0 });
        let up2 = up1.map(|v| 1.0 - v);
        let g1 = self.live[0].input_gradient_batch(&c1, &up1)?;
        let g2 = self.live[1].input_gradient_batch(&c2, &up2)?;
        let grad = (g1 + g2).rows(d, k).into_owned();
        Ok((q, grad))
    }
}

pub(crate) fn stack(states: &DMatrix<f64>, actions: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if states.ncols() != actions.ncols() {
        return Err(Error::dim("critic batch", states.ncols(), actions.ncols()));
    }
    let (d, k) = (states.nrows(), actions.nrows());
    let mut x = DMatrix::zeros(d + k, states.ncols());
    x.rows_mut(0, d).copy_from(states);
    x.rows_mut(d, k).copy_from(actions);
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticDiagnostics {
    pub target_mean: f64,
    pub q_mean: f64,
    /// Batch mean of `log π_φ(a′|s′) − log π₀(a′|s′)` at the next states.
    pub next_kl_mean: f64,
    pub grad_mean_abs: f64,
}

#[derive(Clone, Debug)]
pub struct CriticStep {
    pub loss: f64,
    pub grads: [GradBuffer; 2],
    pub diagnostics: CriticDiagnostics,
}

#[allow(clippy::too_many_arguments)]
pub fn q_loss_and_grad<R: Rng + ?Sized>(
    critics: &CriticPair,
    online: &OnlinePolicy,
    reference: &RefPolicy,
    batch: &TransitionBatch,
    gamma: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<CriticStep> {
    let noise = DMatrix::from_fn(online.action_dim(), batch.len(), |_, _| rng.sample(StandardNormal));
    q_loss_and_grad_with_noise(critics, online, reference, batch, gamma, alpha, &noise)
}

/// Soft Bellman residual against
/// `y = r + γ(1−done)[min Q̄(s′,a′) − α(log π_φ(a′|s′) − log π₀(a′|s′))]`,
/// summed over both live critics. Targets carry no gradient.
pub fn q_loss_and_grad_with_noise(
    critics: &CriticPair,
    online: &OnlinePolicy,
    reference: &RefPolicy,
    batch: &TransitionBatch,
    gamma: f64,
    alpha: f64,
    next_noise: &DMatrix<f64>,
) -> Result<CriticStep> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Domain("critic loss needs a non-empty batch".into()));
    }
    let next = online.sample_batch(&batch.next_states, next_noise)?;
    let eval = reference.evaluate_batch(&batch.next_states, &next.actions)?;
    let q_next = critics.target_min(&batch.next_states, &next.actions)?;
    let mut y = vec![0.0; b];
    let mut kl = 0.0;
    for c in 0..b {
        let term = next.log_prob[c] - eval.log_density[c];
        if !term.is_finite() || !eval.grad.column(c).iter().all(|g| g.is_finite()) {
            return Err(Error::KlOverflow {
                context: "critic target",
                ref_variance: eval.variance.column(c).min(),
                state: batch.next_states.column(c).iter().copied().collect(),
            });
        }
        kl += term;
        let cont = if batch.terminals[c] { 0.0 } else { 1.0 };
        y[c] = batch.rewards[c] + gamma * cont * (q_next[c] - alpha * term);
    }
    let x = stack(&batch.states, &batch.actions)?;
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut q_sum = 0.0;
    let mut grads = Vec::with_capacity(2);
    for net in &critics.live {
        let cache = net.forward_cached(&x)?;
        let q = cache.output();
        let mut up = DMatrix::zeros(1, b);
        for c in 0..b {
            let r = q[(0, c)] - y[c];
            loss += r * r * inv_b;
            q_sum += q[(0, c)];
            up[(0, c)] = 2.0 * r * inv_b;
        }
        let (g, _) = net.backward_batch(&cache, &up)?;
        if !g.is_finite() || !loss.is_finite() {
            return Err(Error::Overflow {
                context: "critic gradient".into(),
                norm: g.l2_norm(),
            });
        }
        grads.push(g);
    }
    let g2 = grads.pop().expect("two critics");
    let g1 = grads.pop().expect("two critics");
    let grad_mean_abs = 0.5 * (g1.mean_abs() + g2.mean_abs());
    Ok(CriticStep {
        loss,
        grads: [g1, g2],
        diagnostics: CriticDiagnostics {
            target_mean: y.iter().sum::<f64>() * inv_b,
            q_mean: 0.5 * q_sum * inv_b,
            next_kl_mean: kl * inv_b,
            grad_mean_abs,
        },
    })
}

/// `θ̄ ← τθ + (1−τ)θ̄` for both critics.
pub fn target_update(critics: &mut CriticPair, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("smoothing coefficient {tau} outside [0, 1]")));
    }
    let CriticPair { live, target } = critics;
    for (t, l) in target.iter_mut().zip(live.iter()) {
        t.soft_update_from(l, tau)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn target_update_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = CriticPair::new(2, 1, &[4], &mut rng).unwrap();
        for t in c.target.iter_mut() {
            for p in t.tensors_mut() {
                p.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for l in c.live.iter_mut() {
            for p in l.tensors_mut() {
                p.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let before = c.clone();
        target_update(&mut c, 0.0).unwrap();
        assert_eq!(c, before);
        target_update(&mut c, 0.005).unwrap();
        assert!(c.target[0].tensors().flatten().all(|v| (v - 0.005).abs() < 1e-15));
        target_update(&mut c, 1.0).unwrap();
        assert_eq!(c.target, c.live);
        assert!(target_update(&mut c, 1.5).is_err());
    }

    #[test]
    fn min_gradient_follows_smaller_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = CriticPair::new(2, 1, &[6], &mut rng).unwrap();
        let s = DMatrix::from_column_slice(2, 1, &[0.2, -0.4]);
        let a = DMatrix::from_column_slice(1, 1, &[0.3]);
        let (q, g) = c.q_min_and_grad(&s, &a).unwrap();
        let q1 = c.q_values(0, &s, &a).unwrap()[0];
        let q2 = c.q_values(1, &s, &a).unwrap()[0];
        assert_eq!(q[0], q1.min(q2));
        let h = 1e-6;
        let ap = DMatrix::from_column_slice(1, 1, &[0.3 + h]);
        let am = DMatrix::from_column_slice(1, 1, &[0.3 - h]);
        let which = if q1 <= q2 { 0 } else { 1 };
        let fd = (c.q_values(which, &s, &ap).unwrap()[0] - c.q_values(which, &s, &am).unwrap()[0]) / (2.0 * h);
        assert!((fd - g[(0, 0)]).abs() < 1e-6);
    }
}
