use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use super::kernel::{column, KernelSpec};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;

/// Log marginal likelihood value with its gradient with respect to
/// [`KernelSpec::log_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct LogMarginal {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// A Cholesky factor together with the diagonal jitter it needed.
#[derive(Clone, Debug)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

/// Factorizes a symmetric matrix. Tries it as given, then adds diagonal
/// jitter starting at 1e-8 of the mean diagonal and growing tenfold up to 1e-4.
pub fn factorize(k: &DMatrix<f64>) -> Result<Factor> {
    let n = k.nrows();
    let scale = (k.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = 0.0;
    loop {
        let mut m = k.clone();
        let jitter = rel * scale;
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            let diag_ok = chol.l_dirty().diagonal().iter().all(|v| v.is_finite() && *v > 0.0);
            if diag_ok {
                return Ok(Factor { chol, jitter });
            }
        }
        rel = if rel == 0.0 { JITTER_START } else { rel * 10.0 };
        if rel > JITTER_MAX * (1.0 + 1e-9) {
            let min_eigenvalue = if k.iter().all(|v| v.is_finite()) {
                SymmetricEigen::new(k.clone()).eigenvalues.min()
            } else {
                f64::NAN
            };
            return Err(Error::Cholesky {
                jitter: JITTER_MAX * scale,
                min_eigenvalue,
            });
        }
    }
}

/// `−½ yᵀK⁻¹y − ½ log|K| − (N/2) log 2π` for `K = k(S̄,S̄) + σ_n²I`.
///
/// `inputs` holds one state per column (d × N).
pub fn log_marginal_likelihood(
    spec: &KernelSpec,
    inputs: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<LogMarginal> {
    spec.validate()?;
    let n = inputs.ncols();
    let d = spec.dim();
    if inputs.nrows() != d {
        return Err(Error::dim("gp inputs", d, inputs.nrows()));
    }
    if y.len() != n {
        return Err(Error::dim("gp targets", n, y.len()));
    }
    if n == 0 {
        return Err(Error::Domain("log marginal likelihood needs at least one point".into()));
    }

    let mut k = spec.gram(inputs);
    for i in 0..n {
        k[(i, i)] += spec.noise_variance;
    }
    let factor = factorize(&k)?;
    let alpha = factor.chol.solve(y);
    let log_det_half: f64 = factor.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    let value = -0.5 * y.dot(&alpha) - log_det_half - 0.5 * n as f64 * LN_2PI;

    // W = ααᵀ − K⁻¹; ∂L/∂θ = ½ tr(W ∂K/∂θ).
    let mut w = factor.chol.inverse();
    w.neg_mut();
    w.ger(1.0, &alpha, &alpha, 1.0);

    let mut grad = vec![0.0; d + 2];
    let mut delta = vec![0.0; d];
    for j in 0..n {
        let xj = column(inputs, j);
        // Diagonal: only σ_f² contributes (Δ = 0).
        grad[d] += 0.5 * w[(j, j)] * spec.signal_variance;
        grad[d + 1] += 0.5 * w[(j, j)] * spec.noise_variance;
        for i in 0..j {
            let xi = column(inputs, i);
            let mut r2 = 0.0;
            for c in 0..d {
                let s = (xi[c] - xj[c]) / spec.lengthscales[c];
                delta[c] = s * s;
                r2 += delta[c];
            }
            // Symmetric pair counted twice, times the ½.
            let wij = w[(i, j)];
            grad[d] += wij * spec.from_sq_dist(r2);
            let f = wij * spec.lengthscale_factor(r2);
            for c in 0..d {
                grad[c] += f * delta[c];
            }
        }
    }
    Ok(LogMarginal { value, grad })
}
