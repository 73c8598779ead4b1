use serde::{Deserialize, Serialize};

use super::mlp::{GradBuffer, MlpParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Adaptive-moment optimizer state over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct OptimState {
    config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        OptimState {
            config,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_params(config: AdamConfig, params: &MlpParams) -> Self {
        Self::new(config, params.num_params())
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &GradBuffer) -> Result<()> {
        params.check_congruent(&grads.widths())?;
        if params.num_params() != self.m.len() {
            return Err(Error::dim("optimizer moments", self.m.len(), params.num_params()));
        }
        check_finite(grads.tensors().flatten())?;
        let bc = self.advance();
        let cfg = self.config;
        let mut offset = 0;
        for (p, g) in params.tensors_mut().zip(grads.tensors()) {
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            update(p, g, m, v, bc, &cfg);
            offset += p.len();
        }
        Ok(())
    }

    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim("optimizer moments", self.m.len(), params.len()));
        }
        if grads.len() != params.len() {
            return Err(Error::dim("optimizer gradient", params.len(), grads.len()));
        }
        check_finite(grads.iter())?;
        let bc = self.advance();
        let cfg = self.config;
        update(params, grads, &mut self.m, &mut self.v, bc, &cfg);
        Ok(())
    }

    fn advance(&mut self) -> (f64, f64) {
        self.step += 1;
        let t = self.step as i32;
        (
            1.0 - self.config.beta1.powi(t),
            1.0 - self.config.beta2.powi(t),
        )
    }
}

fn update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], bc: (f64, f64), c: &AdamConfig) {
    let (bc1, bc2) = bc;
    for i in 0..p.len() {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}

fn check_finite<'a>(grads: impl Iterator<Item = &'a f64>) -> Result<()> {
    let mut sq = 0.0;
    let mut finite = true;
    for g in grads {
        finite &= g.is_finite();
        sq += g * g;
    }
    if !finite || !sq.is_finite() {
        return Err(Error::Overflow {
            context: "optimizer step".into(),
            norm: sq.sqrt(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut net = MlpParams::new(&[3, 4, 2], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = net.clone();
        let mut opt = OptimState::for_params(AdamConfig::default(), &net);
        let g = GradBuffer::zeros_like(&net);
        opt.step(&mut net, &g).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = vec![1.0, -2.0, 0.5, 0.0];
        let g = vec![0.3, -4.0, 1e-3, 2.5];
        let mut opt = OptimState::new(cfg, 4);
        opt.step_flat(&mut p, &g).unwrap();
        for (i, (&p0, &gi)) in [1.0, -2.0, 0.5, 0.0].iter().zip(&g).enumerate() {
            let expected = p0 - cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((p[i] - expected).abs() < 1e-15, "entry {i}");
        }
    }

    #[test]
    fn repeated_gradient_moves_monotonically() {
        let mut p = vec![0.0, 0.0];
        let g = vec![1.0, -0.5];
        let mut opt = OptimState::new(AdamConfig::default(), 2);
        let mut prev = p.clone();
        for _ in 0..2 {
            opt.step_flat(&mut p, &g).unwrap();
            assert!(p[0] < prev[0]);
            assert!(p[1] > prev[1]);
            prev = p.clone();
        }
    }

    #[test]
    fn non_finite_gradient_is_overflow() {
        let mut p = vec![0.0, 0.0];
        let mut opt = OptimState::new(AdamConfig::default(), 2);
        let err = opt.step_flat(&mut p, &[1.0, f64::INFINITY]).unwrap_err();
        match err {
            Error::Overflow { norm, .. } => assert!(norm.is_infinite()),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(opt.step_count(), 0);
        assert_eq!(p, vec![0.0, 0.0]);
    }
}
