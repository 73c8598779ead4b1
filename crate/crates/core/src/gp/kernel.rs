use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    #[serde(rename = "rbf", alias = "squared-exponential")]
    SquaredExponential,
    /// Matérn with smoothness 5/2.
    #[serde(rename = "matern52", alias = "matern")]
    Matern52,
}

/// Stationary covariance function with automatic relevance determination
/// lengthscales plus an observation-noise term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelSpec {
    pub fn new(
        kind: KernelKind,
        lengthscales: Vec<f64>,
        signal_variance: f64,
        noise_variance: f64,
    ) -> Result<Self> {
        let spec = KernelSpec {
            kind,
            lengthscales,
            signal_variance,
            noise_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.lengthscales.is_empty() {
            return Err(Error::Domain("kernel needs at least one lengthscale".into()));
        }
        if let Some(l) = self.lengthscales.iter().find(|&&l| !positive(l)) {
            return Err(Error::Domain(format!("lengthscale must be positive, got {l}")));
        }
        if !positive(self.signal_variance) {
            return Err(Error::Domain(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if !positive(self.noise_variance) {
            return Err(Error::Domain(format!(
                "noise variance must be positive, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Kernel value between two states (latent covariance, no noise term).
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.validate()?;
        if x.len() != self.dim() {
            return Err(Error::dim("kernel input", self.dim(), x.len()));
        }
        if y.len() != self.dim() {
            return Err(Error::dim("kernel input", self.dim(), y.len()));
        }
        Ok(self.eval_unchecked(x, y))
    }

    pub(crate) fn scaled_sq_dist(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let d = (a - b) / l;
                d * d
            })
            .sum()
    }

    pub(crate) fn from_sq_dist(&self, r2: f64) -> f64 {
        match self.kind {
            KernelKind::SquaredExponential => self.signal_variance * (-0.5 * r2).exp(),
            KernelKind::Matern52 => {
                let r = r2.sqrt();
                self.signal_variance * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp()
            }
        }
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        self.from_sq_dist(self.scaled_sq_dist(x, y))
    }

    /// `∂k/∂log ℓ_d = lengthscale_factor(r²) · (Δ_d/ℓ_d)²`.
    pub(crate) fn lengthscale_factor(&self, r2: f64) -> f64 {
        match self.kind {
            KernelKind::SquaredExponential => self.signal_variance * (-0.5 * r2).exp(),
            KernelKind::Matern52 => {
                let r = r2.sqrt();
                self.signal_variance * 5.0 / 3.0 * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp()
            }
        }
    }

    /// Latent Gram matrix over the columns of `inputs` (d × N), no noise.
    pub fn gram(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = inputs.ncols();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            let xj = column(inputs, j);
            k[(j, j)] = self.signal_variance;
            for i in 0..j {
                let v = self.eval_unchecked(column(inputs, i), xj);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// Cross-covariance between the columns of `a` (d × N) and `b` (d × M).
    pub fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(a.ncols(), b.ncols(), |i, j| {
            self.eval_unchecked(column(a, i), column(b, j))
        })
    }

    /// Log-space hyperparameters `[log ℓ_1.., log σ_f², log σ_n²]`.
    pub fn log_params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        p.push(self.signal_variance.ln());
        p.push(self.noise_variance.ln());
        p
    }

    pub fn from_log_params(kind: KernelKind, p: &[f64]) -> Self {
        let d = p.len() - 2;
        KernelSpec {
            kind,
            lengthscales: p[..d].iter().map(|v| v.exp()).collect(),
            signal_variance: p[d].exp(),
            noise_variance: p[d + 1].exp(),
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], x_prime: &[f64]) -> Result<f64> {
    spec.eval(x, x_prime)
}

#[inline]
pub(crate) fn column(m: &DMatrix<f64>, j: usize) -> &[f64] {
    let d = m.nrows();
    &m.as_slice()[j * d..(j + 1) * d]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn se(l: Vec<f64>, sf2: f64) -> KernelSpec {
        KernelSpec::new(KernelKind::SquaredExponential, l, sf2, 1e-2).unwrap()
    }

    #[test]
    fn zero_distance_gives_signal_variance() {
        for kind in [KernelKind::SquaredExponential, KernelKind::Matern52] {
            let k = KernelSpec::new(kind, vec![0.3, 2.0], 1.7, 1e-3).unwrap();
            assert_eq!(k.eval(&[0.4, -1.0], &[0.4, -1.0]).unwrap(), 1.7);
        }
    }

    #[test]
    fn unit_distance_squared_exponential() {
        let k = se(vec![1.0, 1.0], 1.0);
        let v = k.eval(&[0.0, 0.0], &[0.6, 0.8]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn matern_closed_form() {
        let k = KernelSpec::new(KernelKind::Matern52, vec![2.0], 0.5, 1e-3).unwrap();
        let r: f64 = 1.5 / 2.0;
        let expected = 0.5 * (1.0 + 5f64.sqrt() * r + 5.0 / 3.0 * r * r) * (-(5f64.sqrt()) * r).exp();
        assert!((k.eval(&[0.5], &[2.0]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters_and_shapes() {
        assert!(matches!(
            KernelSpec::new(KernelKind::SquaredExponential, vec![1.0, 0.0], 1.0, 1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            KernelSpec::new(KernelKind::Matern52, vec![1.0], -1.0, 1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            KernelSpec::new(KernelKind::Matern52, vec![1.0], 1.0, 0.0),
            Err(Error::Domain(_))
        ));
        let k = se(vec![1.0, 1.0], 1.0);
        assert!(matches!(k.eval(&[0.0], &[0.0, 1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn log_params_round_trip() {
        let k = KernelSpec::new(KernelKind::Matern52, vec![0.2, 3.0], 0.7, 1e-4).unwrap();
        let back = KernelSpec::from_log_params(k.kind, &k.log_params());
        for (a, b) in k.lengthscales.iter().zip(&back.lengthscales) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((k.noise_variance - back.noise_variance).abs() < 1e-18);
    }

    #[test]
    fn kind_names_in_json() {
        assert_eq!(serde_json::to_string(&KernelKind::SquaredExponential).unwrap(), "\"rbf\"");
        let k: KernelKind = serde_json::from_str("\"matern52\"").unwrap();
        assert_eq!(k, KernelKind::Matern52);
    }
}
