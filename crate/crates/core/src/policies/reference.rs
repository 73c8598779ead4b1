use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diffcore::MlpParams;
use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::numeric::{softplus, LN_2PI};

/// Floor added to every network-predicted variance.
pub const VARIANCE_FLOOR: f64 = 1e-4;

/// Regularizer used when the Gaussian head was fitted. Kept with the
/// parameters so the variant tag survives serialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MleReg {
    None,
    Entropy { beta: f64 },
    Tikhonov { lambda: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnsembleSource {
    /// Independently trained members.
    Members,
    /// Fixed dropout masks of one network trained with dropout.
    Dropout { drop_prob: f64 },
}

/// Uniform mixture of Gaussian-head networks, summarized by its first two
/// moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsemblePolicy {
    members: Vec<MlpParams>,
    source: EnsembleSource,
}

impl EnsemblePolicy {
    pub fn new(members: Vec<MlpParams>, source: EnsembleSource) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Domain("ensemble needs at least one member".into()))?;
        let widths = (first.input_dim(), first.output_dim());
        if widths.1 % 2 != 0 {
            return Err(Error::Domain("ensemble member outputs must be mean and scale pairs".into()));
        }
        for m in &members[1..] {
            if (m.input_dim(), m.output_dim()) != widths {
                return Err(Error::dim("ensemble member output", widths.1, m.output_dim()));
            }
        }
        Ok(EnsemblePolicy { members, source })
    }

    pub fn members(&self) -> &[MlpParams] {
        &self.members
    }

    pub fn source(&self) -> EnsembleSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Mixture mean `(1/K)Σμ_k` and variance `(1/K)Σ(σ_k² + μ_k²) − μ²`.
    pub fn moments_batch(&self, states: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let per_member = self
            .members
            .iter()
            .map(|m| gaussian_head(m, states))
            .collect::<Result<Vec<_>>>()?;
        Ok(ensemble_moments(&per_member))
    }
}

/// Combines member moment pairs `(μ_k, σ_k²)` into mixture moments.
pub fn ensemble_moments(members: &[(DMatrix<f64>, DMatrix<f64>)]) -> (DMatrix<f64>, DMatrix<f64>) {
    let kf = members.len() as f64;
    let (r, c) = members[0].0.shape();
    let mut mean = DMatrix::zeros(r, c);
    let mut second = DMatrix::zeros(r, c);
    for (mu, var) in members {
        mean += mu;
        second += var + mu.component_mul(mu);
    }
    mean /= kf;
    second /= kf;
    let var = second - mean.component_mul(&mean);
    // Identical members can round to a hair below their common variance.
    let floor = members
        .iter()
        .map(|(_, v)| v.min())
        .fold(f64::INFINITY, f64::min)
        .min(VARIANCE_FLOOR);
    (mean, var.map(|v| v.max(floor)))
}

/// Mean and floored variance of a Gaussian-head network (k × B each).
pub fn gaussian_head(net: &MlpParams, states: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let out = net.forward_batch(states)?;
    let k = out.nrows() / 2;
    let mean = out.rows(0, k).into_owned();
    let var = out.rows(k, k).map(|r| softplus(r) + VARIANCE_FLOOR);
    Ok((mean, var))
}

/// Behavioral reference policy π₀ over box-bounded actions.
#[derive(Clone, Debug)]
pub enum RefPolicy {
    Gp(GpPosterior),
    Mle { net: MlpParams, reg: MleReg },
    Ensemble(EnsemblePolicy),
    /// Laplace head with scale `b = sqrt(softplus(raw) + floor)`.
    Laplace { net: MlpParams },
    /// Mean of another reference with every variance replaced by `variance`.
    ConstantVariance { mean: Box<RefPolicy>, variance: f64 },
}

/// Reference moments, log-density and action gradient over a batch.
/// Matrices are action-dim × batch.
#[derive(Clone, Debug)]
pub struct RefEval {
    pub mean: DMatrix<f64>,
    pub variance: DMatrix<f64>,
    pub log_density: Vec<f64>,
    pub grad: DMatrix<f64>,
}

impl RefPolicy {
    pub fn constant_variance(mean: RefPolicy, variance: f64) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::Domain(format!("constant variance must be positive, got {variance}")));
        }
        Ok(RefPolicy::ConstantVariance {
            mean: Box::new(mean),
            variance,
        })
    }

    pub fn variant(&self) -> &'static str {
        match self {
            RefPolicy::Gp(_) => "gp",
            RefPolicy::Mle { reg: MleReg::None, .. } => "mle-gaussian",
            RefPolicy::Mle { reg: MleReg::Entropy { .. }, .. } => "mle-entropy",
            RefPolicy::Mle { reg: MleReg::Tikhonov { .. }, .. } => "mle-tikhonov",
            RefPolicy::Ensemble(_) => "ensemble",
            RefPolicy::Laplace { .. } => "laplace",
            RefPolicy::ConstantVariance { .. } => "constant-variance",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            RefPolicy::Gp(gp) => gp.state_dim(),
            RefPolicy::Mle { net, .. } | RefPolicy::Laplace { net } => net.input_dim(),
            RefPolicy::Ensemble(e) => e.members[0].input_dim(),
            RefPolicy::ConstantVariance { mean, .. } => mean.state_dim(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            RefPolicy::Gp(gp) => gp.action_dim(),
            RefPolicy::Mle { net, .. } | RefPolicy::Laplace { net } => net.output_dim() / 2,
            RefPolicy::Ensemble(e) => e.members[0].output_dim() / 2,
            RefPolicy::ConstantVariance { mean, .. } => mean.action_dim(),
        }
    }

    fn check_states(&self, states: &DMatrix<f64>) -> Result<()> {
        if states.nrows() != self.state_dim() {
            return Err(Error::dim("reference state", self.state_dim(), states.nrows()));
        }
        Ok(())
    }

    /// Mean and variance for the columns of `states` (d × B).
    pub fn moments_batch(&self, states: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_states(states)?;
        match self {
            RefPolicy::Gp(gp) => gp.predict_batch(states),
            RefPolicy::Mle { net, .. } => gaussian_head(net, states),
            RefPolicy::Ensemble(e) => e.moments_batch(states),
            RefPolicy::Laplace { net } => {
                let (mean, b2) = gaussian_head(net, states)?;
                Ok((mean, b2 * 2.0))
            }
            RefPolicy::ConstantVariance { mean, variance } => {
                let (m, _) = mean.moments_batch(states)?;
                let v = DMatrix::from_element(m.nrows(), m.ncols(), *variance);
                Ok((m, v))
            }
        }
    }

    pub fn evaluate_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> Result<RefEval> {
        self.check_states(states)?;
        let k = self.action_dim();
        if actions.nrows() != k || actions.ncols() != states.ncols() {
            return Err(Error::dim("reference action rows", k, actions.nrows()));
        }
        if let RefPolicy::Laplace { net } = self {
            let (mean, b2) = gaussian_head(net, states)?;
            let b = b2.map(f64::sqrt);
            let mut log_density = vec![0.0; states.ncols()];
            let mut grad = DMatrix::zeros(k, states.ncols());
            for c in 0..states.ncols() {
                for i in 0..k {
                    let (r, bi) = (actions[(i, c)] - mean[(i, c)], b[(i, c)]);
                    log_density[c] += -(2.0 * bi).ln() - r.abs() / bi;
                    grad[(i, c)] = if r == 0.0 { 0.0 } else { -r.signum() / bi };
                }
            }
            return Ok(RefEval {
                mean,
                variance: b2 * 2.0,
                log_density,
                grad,
            });
        }
        let (mean, variance) = self.moments_batch(states)?;
        let mut log_density = vec![0.0; states.ncols()];
        let mut grad = DMatrix::zeros(k, states.ncols());
        for c in 0..states.ncols() {
            for i in 0..k {
                let (r, v) = (actions[(i, c)] - mean[(i, c)], variance[(i, c)]);
                log_density[c] += -0.5 * (LN_2PI + v.ln() + r * r / v);
                grad[(i, c)] = -r / v;
            }
        }
        Ok(RefEval {
            mean,
            variance,
            log_density,
            grad,
        })
    }

    pub fn moments(&self, s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (m, v) = self.moments_batch(&column_of(s))?;
        Ok((m.as_slice().to_vec(), v.as_slice().to_vec()))
    }

    pub fn log_density(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.evaluate_batch(&column_of(s), &column_of(a))?.log_density[0])
    }

    pub fn log_density_grad(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate_batch(&column_of(s), &column_of(a))?.grad.as_slice().to_vec())
    }
}

pub fn ref_moments(r: &RefPolicy, s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    r.moments(s)
}

pub fn ref_log_density(r: &RefPolicy, s: &[f64], a: &[f64]) -> Result<f64> {
    r.log_density(s, a)
}

pub fn ref_log_density_grad(r: &RefPolicy, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    r.log_density_grad(s, a)
}

fn column_of(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Layer;
    use nalgebra::DVector;

    /// Zero-weight head with output biases `[μ, raw]` so moments are constant.
    fn constant_head(mu: f64, var: f64) -> MlpParams {
        let raw = (var - VARIANCE_FLOOR).exp_m1().ln();
        let mut layer = Layer::zeros(1, 2);
        layer.bias = DVector::from_vec(vec![mu, raw]);
        MlpParams::from_layers(vec![layer]).unwrap()
    }

    #[test]
    fn standard_normal_mode_density() {
        let r = RefPolicy::Mle { net: constant_head(0.4, 1.0), reg: MleReg::None };
        let (_, v) = r.moments(&[0.0]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!((r.log_density(&[0.0], &[0.4]).unwrap() + 0.918_94).abs() < 1e-5);
        assert_eq!(r.log_density_grad(&[0.0], &[0.4]).unwrap(), vec![0.0]);
    }

    #[test]
    fn laplace_density_and_gradient() {
        // b = 1 needs softplus(raw) + floor = 1.
        let r = RefPolicy::Laplace { net: constant_head(0.0, 1.0) };
        let lp = r.log_density(&[0.0], &[2.0]).unwrap();
        assert!((lp - (-(2f64.ln()) - 2.0)).abs() < 1e-12);
        assert!((lp + 2.693_15).abs() < 1e-5);
        assert!((r.log_density_grad(&[0.0], &[2.0]).unwrap()[0] + 1.0).abs() < 1e-12);
        assert!((r.moments(&[0.0]).unwrap().1[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_variance_density_is_large_but_finite() {
        let inner = RefPolicy::Mle { net: constant_head(0.0, 1.0), reg: MleReg::None };
        let r = RefPolicy::constant_variance(inner, 1e-3).unwrap();
        let lp = r.log_density(&[0.0], &[1.0]).unwrap();
        let expected = -0.5 * (LN_2PI + (1e-3f64).ln()) - 500.0;
        assert!((lp - expected).abs() < 1e-9);
        assert!((lp + 497.46).abs() < 0.01);
    }

    #[test]
    fn constant_variance_wraps_mean() {
        let inner = RefPolicy::Mle { net: constant_head(0.25, 0.3), reg: MleReg::None };
        let r = RefPolicy::constant_variance(inner, 1e-2).unwrap();
        let (m, v) = r.moments(&[0.7]).unwrap();
        assert_eq!(v, vec![1e-2]);
        assert!((m[0] - 0.25).abs() < 1e-15);
        assert!(RefPolicy::constant_variance(r.clone(), 0.0).is_err());
    }

    #[test]
    fn halving_variance_doubles_gradient() {
        let mk = |c| {
            RefPolicy::constant_variance(RefPolicy::Mle { net: constant_head(0.0, 1.0), reg: MleReg::None }, c)
                .unwrap()
        };
        let g1 = mk(1e-2).log_density_grad(&[0.0], &[0.1]).unwrap()[0];
        let g2 = mk(5e-3).log_density_grad(&[0.0], &[0.1]).unwrap()[0];
        assert!((g1 + 10.0).abs() < 1e-9);
        assert!((g2 + 20.0).abs() < 1e-9);
    }

    #[test]
    fn ensemble_moment_algebra() {
        let e = EnsemblePolicy::new(
            vec![constant_head(0.0, 1.0), constant_head(2.0, 1.0)],
            EnsembleSource::Members,
        )
        .unwrap();
        let (m, v) = RefPolicy::Ensemble(e).moments(&[0.3]).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12);
        assert!((v[0] - 2.0).abs() < 1e-12);

        let same = EnsemblePolicy::new(vec![constant_head(0.5, 0.2); 3], EnsembleSource::Members).unwrap();
        let (m, v) = RefPolicy::Ensemble(same).moments(&[0.3]).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-12);
        assert!((v[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn variant_tags() {
        let r = RefPolicy::Mle { net: constant_head(0.0, 1.0), reg: MleReg::Tikhonov { lambda: 1.0 } };
        assert_eq!(r.variant(), "mle-tikhonov");
        assert!(EnsemblePolicy::new(vec![], EnsembleSource::Members).is_err());
    }
}
