use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::kernel::{column, KernelSpec};
use super::lml::factorize;
use crate::error::{Error, Result};

const FORMAT: &str = "klprior-gp";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
struct OutputGp {
    kernel: KernelSpec,
    /// Lower Cholesky factor of `k(S̄,S̄) + σ_n²I` (+ jitter).
    l: DMatrix<f64>,
    /// `K⁻¹ (ā − m)` in standardized units.
    weights: DVector<f64>,
    jitter: f64,
}

/// Independent exact GP per action dimension over a shared input set.
///
/// Targets are standardized per dimension before conditioning so the prior
/// mean is zero; predictions are mapped back to action units.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    /// d × N, one training state per column.
    inputs: DMatrix<f64>,
    /// N × k raw training actions.
    targets: DMatrix<f64>,
    target_mean: Vec<f64>,
    target_scale: Vec<f64>,
    outputs: Vec<OutputGp>,
}

impl GpPosterior {
    /// Conditions on `states` (N × d) and `actions` (N × k), standardizing
    /// each action column.
    pub fn condition(
        kernels: Vec<KernelSpec>,
        states: &DMatrix<f64>,
        actions: &DMatrix<f64>,
    ) -> Result<Self> {
        let (mean, scale) = standardization(actions);
        Self::condition_with(kernels, states, actions, mean, scale)
    }

    /// Conditions on raw targets with a zero prior mean and no rescaling.
    pub fn condition_raw(
        kernels: Vec<KernelSpec>,
        states: &DMatrix<f64>,
        actions: &DMatrix<f64>,
    ) -> Result<Self> {
        let k = actions.ncols();
        Self::condition_with(kernels, states, actions, vec![0.0; k], vec![1.0; k])
    }

    pub(crate) fn condition_with(
        kernels: Vec<KernelSpec>,
        states: &DMatrix<f64>,
        actions: &DMatrix<f64>,
        target_mean: Vec<f64>,
        target_scale: Vec<f64>,
    ) -> Result<Self> {
        let n = states.nrows();
        if n == 0 {
            return Err(Error::Domain("gp needs at least one training point".into()));
        }
        if actions.nrows() != n {
            return Err(Error::dim("gp training actions", n, actions.nrows()));
        }
        if kernels.len() != actions.ncols() {
            return Err(Error::dim("gp kernels per action dimension", actions.ncols(), kernels.len()));
        }
        if target_mean.len() != actions.ncols() || target_scale.len() != actions.ncols() {
            return Err(Error::dim("gp standardization", actions.ncols(), target_mean.len()));
        }
        if !states.iter().chain(actions.iter()).all(|v| v.is_finite()) {
            return Err(Error::Domain("gp training data must be finite".into()));
        }
        if target_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Domain("gp target scale must be positive".into()));
        }
        let inputs = states.transpose();
        let mut outputs = Vec::with_capacity(kernels.len());
        for (j, kernel) in kernels.into_iter().enumerate() {
            kernel.validate()?;
            if kernel.dim() != inputs.nrows() {
                return Err(Error::dim("gp lengthscales", inputs.nrows(), kernel.dim()));
            }
            let mut k = kernel.gram(&inputs);
            for i in 0..n {
                k[(i, i)] += kernel.noise_variance;
            }
            let factor = factorize(&k)?;
            let y = DVector::from_iterator(
                n,
                actions.column(j).iter().map(|a| (a - target_mean[j]) / target_scale[j]),
            );
            let weights = factor.chol.solve(&y);
            outputs.push(OutputGp {
                l: factor.chol.l(),
                kernel,
                weights,
                jitter: factor.jitter,
            });
        }
        Ok(GpPosterior {
            inputs,
            targets: actions.clone(),
            target_mean,
            target_scale,
            outputs,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.outputs.len()
    }

    pub fn num_points(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn kernels(&self) -> Vec<&KernelSpec> {
        self.outputs.iter().map(|o| &o.kernel).collect()
    }

    pub fn kernel(&self, dim: usize) -> &KernelSpec {
        &self.outputs[dim].kernel
    }

    /// Lower Cholesky factor for one action dimension.
    pub fn cholesky_factor(&self, dim: usize) -> &DMatrix<f64> {
        &self.outputs[dim].l
    }

    pub fn jitter(&self, dim: usize) -> f64 {
        self.outputs[dim].jitter
    }

    /// Training states as N × d.
    pub fn training_states(&self) -> DMatrix<f64> {
        self.inputs.transpose()
    }

    pub fn training_actions(&self) -> &DMatrix<f64> {
        &self.targets
    }

    pub fn target_mean(&self) -> &[f64] {
        &self.target_mean
    }

    pub fn target_scale(&self) -> &[f64] {
        &self.target_scale
    }

    /// Predictive mean and variance (observation noise included).
    pub fn predict(&self, s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if s.len() != self.state_dim() {
            return Err(Error::dim("gp query state", self.state_dim(), s.len()));
        }
        let q = DMatrix::from_column_slice(s.len(), 1, s);
        let (m, v) = self.predict_columns(&q);
        Ok((m.column(0).iter().copied().collect(), v.column(0).iter().copied().collect()))
    }

    /// Batched prediction over the columns of `states` (d × B). Returns
    /// mean and variance as k × B.
    pub fn predict_batch(&self, states: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if states.nrows() != self.state_dim() {
            return Err(Error::dim("gp query states", self.state_dim(), states.nrows()));
        }
        Ok(self.predict_columns(states))
    }

    fn predict_columns(&self, q: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let b = q.ncols();
        let k = self.action_dim();
        let mut mean = DMatrix::zeros(k, b);
        let mut var = DMatrix::zeros(k, b);
        let mut cached: Option<(usize, DMatrix<f64>)> = None;
        for (j, out) in self.outputs.iter().enumerate() {
            // Dimensions with identical hyperparameters share one cross-covariance.
            let reuse = matches!(&cached, Some((c, _)) if same_shape(&self.outputs[*c].kernel, &out.kernel));
            if !reuse {
                cached = Some((j, out.kernel.cross(&self.inputs, q)));
            }
            let ks = &cached.as_ref().expect("cross-covariance computed").1;
            let mu = ks.tr_mul(&out.weights);
            let v = out
                .l
                .solve_lower_triangular(ks)
                .expect("cholesky factor has positive diagonal");
            let (m0, sc) = (self.target_mean[j], self.target_scale[j]);
            for c in 0..b {
                let reduction: f64 = v.column(c).norm_squared();
                let latent = (out.kernel.signal_variance - reduction).max(0.0);
                mean[(j, c)] = m0 + sc * mu[c];
                var[(j, c)] = sc * sc * (latent + out.kernel.noise_variance);
            }
        }
        (mean, var)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GpRecord::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: GpRecord = serde_json::from_str(text)?;
        record.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn same_shape(a: &KernelSpec, b: &KernelSpec) -> bool {
    a.kind == b.kind && a.lengthscales == b.lengthscales
}

/// Per-column mean and population standard deviation; a constant column
/// keeps unit scale.
pub(crate) fn standardization(actions: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = actions.nrows().max(1) as f64;
    actions
        .column_iter()
        .map(|c| {
            let m = c.sum() / n;
            let var = c.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            let s = var.sqrt();
            (m, if s > 1e-8 { s } else { 1.0 })
        })
        .unzip()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct GpRecord {
    format: String,
    version: u32,
    kernels: Vec<KernelSpec>,
    target_mean: Vec<f64>,
    target_scale: Vec<f64>,
    /// Row-major, one state per row.
    states: Vec<Vec<f64>>,
    /// Row-major, one action per row.
    actions: Vec<Vec<f64>>,
}

impl From<&GpPosterior> for GpRecord {
    fn from(gp: &GpPosterior) -> Self {
        GpRecord {
            format: FORMAT.into(),
            version: VERSION,
            kernels: gp.outputs.iter().map(|o| o.kernel.clone()).collect(),
            target_mean: gp.target_mean.clone(),
            target_scale: gp.target_scale.clone(),
            states: (0..gp.num_points()).map(|i| column(&gp.inputs, i).to_vec()).collect(),
            actions: gp.targets.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl TryFrom<GpRecord> for GpPosterior {
    type Error = Error;

    fn try_from(r: GpRecord) -> Result<Self> {
        if r.format != FORMAT {
            return Err(Error::Domain(format!("unexpected gp format {:?}", r.format)));
        }
        if r.version != VERSION {
            return Err(Error::Domain(format!("unsupported gp version {}", r.version)));
        }
        let states = rows_to_matrix(&r.states, "gp states")?;
        let actions = rows_to_matrix(&r.actions, "gp actions")?;
        GpPosterior::condition_with(r.kernels, &states, &actions, r.target_mean, r.target_scale)
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], context: &'static str) -> Result<DMatrix<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::dim(context, width, bad.len()));
    }
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::KernelKind;

    fn se(l: f64, sf2: f64, sn2: f64) -> KernelSpec {
        KernelSpec::new(KernelKind::SquaredExponential, vec![l], sf2, sn2).unwrap()
    }

    #[test]
    fn interpolates_training_input() {
        let s = DMatrix::from_row_slice(3, 1, &[-0.5, 0.1, 0.9]);
        let a = DMatrix::from_row_slice(3, 1, &[0.3, -0.2, 0.7]);
        let gp = GpPosterior::condition_raw(vec![se(0.4, 1.0, 1e-6)], &s, &a).unwrap();
        let (m, v) = gp.predict(&[0.1]).unwrap();
        assert!((m[0] + 0.2).abs() < 1e-3);
        assert!(v[0] < 1e-4);
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let s = DMatrix::from_row_slice(2, 1, &[0.0, 0.2]);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.2]);
        let kern = se(0.3, 2.0, 0.1);
        let gp = GpPosterior::condition_raw(vec![kern], &s, &a).unwrap();
        let (m, v) = gp.predict(&[3.5]).unwrap();
        assert!(v[0] > 0.99 * 2.1);
        assert!(m[0].abs() < 1e-6);
    }

    #[test]
    fn two_point_direct_inverse() {
        let s = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let (sf2, sn2) = (1.5, 0.1);
        let gp = GpPosterior::condition_raw(vec![se(1.0, sf2, sn2)], &s, &a).unwrap();
        let k01 = sf2 * (-0.5f64).exp();
        let (p, q) = (sf2 + sn2, k01);
        let det = p * p - q * q;
        let inv = [[p / det, -q / det], [-q / det, p / det]];
        let x = 0.4f64;
        let ks = [sf2 * (-0.5 * x * x).exp(), sf2 * (-0.5 * (x - 1.0) * (x - 1.0)).exp()];
        let y = [1.0, -1.0];
        let mut mean = 0.0;
        let mut red = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                mean += ks[i] * inv[i][j] * y[j];
                red += ks[i] * inv[i][j] * ks[j];
            }
        }
        let (m, v) = gp.predict(&[x]).unwrap();
        assert!((m[0] - mean).abs() < 1e-12);
        assert!((v[0] - (sf2 - red + sn2)).abs() < 1e-12);
    }

    #[test]
    fn standardized_constant_targets() {
        let s = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        let a = DMatrix::from_element(4, 1, 0.37);
        let kern = KernelSpec::new(KernelKind::Matern52, vec![1.0, 1.0], 1.0, 1e-4).unwrap();
        let gp = GpPosterior::condition(vec![kern], &s, &a).unwrap();
        for i in 0..4 {
            let (m, _) = gp.predict(&[s[(i, 0)], s[(i, 1)]]).unwrap();
            assert!((m[0] - 0.37).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_matches_pointwise() {
        let s = DMatrix::from_row_slice(3, 2, &[0.0, 0.1, 0.5, -0.3, -0.8, 0.9]);
        let a = DMatrix::from_row_slice(3, 2, &[0.2, 1.0, -0.4, 0.3, 0.6, -0.7]);
        let kerns = vec![
            KernelSpec::new(KernelKind::SquaredExponential, vec![0.5, 0.9], 1.0, 1e-2).unwrap(),
            KernelSpec::new(KernelKind::Matern52, vec![0.7, 0.4], 0.6, 1e-3).unwrap(),
        ];
        let gp = GpPosterior::condition(kerns, &s, &a).unwrap();
        let q = DMatrix::from_column_slice(2, 2, &[0.3, 0.3, -1.0, 2.0]);
        let (mb, vb) = gp.predict_batch(&q).unwrap();
        for c in 0..2 {
            let (m, v) = gp.predict(&[q[(0, c)], q[(1, c)]]).unwrap();
            for j in 0..2 {
                assert!((m[j] - mb[(j, c)]).abs() < 1e-14);
                assert!((v[j] - vb[(j, c)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn json_reload_reproduces_predictions() {
        let s = DMatrix::from_row_slice(3, 2, &[0.0, 0.1, 0.5, -0.3, -0.8, 0.9]);
        let a = DMatrix::from_row_slice(3, 1, &[0.2, -0.4, 0.6]);
        let kern = KernelSpec::new(KernelKind::Matern52, vec![0.7, 0.4], 0.6, 1e-3).unwrap();
        let gp = GpPosterior::condition(vec![kern], &s, &a).unwrap();
        let back = GpPosterior::from_json(&gp.to_json().unwrap()).unwrap();
        let (m1, v1) = gp.predict(&[0.2, -0.1]).unwrap();
        let (m2, v2) = back.predict(&[0.2, -0.1]).unwrap();
        assert!(((m1[0] - m2[0]) / m1[0]).abs() < 1e-12);
        assert!(((v1[0] - v2[0]) / v1[0]).abs() < 1e-12);
    }

    #[test]
    fn rejects_shape_errors() {
        let s = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let a = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let gp = GpPosterior::condition(vec![se(1.0, 1.0, 0.1)], &s, &a).unwrap();
        assert!(matches!(gp.predict(&[0.0, 1.0]), Err(Error::Dimension { .. })));
        let empty = DMatrix::<f64>::zeros(0, 1);
        assert!(GpPosterior::condition(vec![se(1.0, 1.0, 0.1)], &empty, &empty).is_err());
    }
}
