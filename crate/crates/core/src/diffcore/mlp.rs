//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Batches are column-major: every column of an input matrix is one sample.
//! Hidden layers use rectified-linear activations, the output layer is linear.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One affine layer `z = W a + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weights: DMatrix::zeros(fan_out, fan_in),
            bias: DVector::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }
}

/// Parameters of a multilayer perceptron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRecord", into = "MlpRecord")]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
    masks: Option<Vec<DMatrix<f64>>>,
}

impl ForwardCache {
    /// Network output, one column per sample.
    pub fn output(&self) -> &DMatrix<f64> {
        self.pre.last().expect("network has at least one layer")
    }

    pub fn input(&self) -> &DMatrix<f64> {
        &self.input
    }

    pub fn batch_size(&self) -> usize {
        self.input.ncols()
    }
}

impl MlpParams {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights =
                    DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
                let bias = DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..bound));
                Layer { weights, bias }
            })
            .collect();
        Ok(MlpParams { layers })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        let layers = widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(MlpParams { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Domain("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::dim("layer bias", layer.fan_out(), layer.bias.len()));
            }
            if i > 0 && layers[i - 1].fan_out() != layer.fan_in() {
                return Err(Error::dim("layer composition", layers[i - 1].fan_out(), layer.fan_in()));
            }
            if !layer.weights.iter().chain(layer.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Domain(format!("layer {i} has non-finite entries")));
            }
        }
        Ok(MlpParams { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut widths = vec![self.input_dim()];
        widths.extend(self.layers.iter().map(Layer::fan_out));
        widths
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(<[f64]>::len).sum()
    }

    /// Parameter tensors in a fixed order: weights then bias, layer by layer.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors().flatten().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().flatten().all(|v| v.is_finite())
    }

    /// Euclidean distance between two congruent parameter sets.
    pub fn distance(&self, other: &MlpParams) -> Result<f64> {
        self.check_congruent(&other.widths())?;
        Ok(self
            .tensors()
            .flatten()
            .zip(other.tensors().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Exponential smoothing toward `live`: `self <- tau * live + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, live: &MlpParams, tau: f64) -> Result<()> {
        self.check_congruent(&live.widths())?;
        for (t, l) in self.tensors_mut().zip(live.tensors()) {
            for (tv, lv) in t.iter_mut().zip(l) {
                *tv = tau * lv + (1.0 - tau) * *tv;
            }
        }
        Ok(())
    }

    pub(crate) fn check_congruent(&self, widths: &[usize]) -> Result<()> {
        let own = self.widths();
        if own.len() != widths.len() {
            return Err(Error::dim("network depth", own.len(), widths.len()));
        }
        for (a, b) in own.iter().zip(widths) {
            if a != b {
                return Err(Error::dim("network width", *a, *b));
            }
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.forward_batch(&x)?.as_slice().to_vec())
    }

    /// Gradients of `upstreamᵀ · output` with respect to the parameters and the input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(GradBuffer, Vec<f64>)> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        let cache = self.forward_cached(&x)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::dim("upstream gradient", self.output_dim(), upstream.len()));
        }
        let u = DMatrix::from_column_slice(upstream.len(), 1, upstream);
        let (grads, dx) = self.backward_batch(&cache, &u)?;
        Ok((grads, dx.as_slice().to_vec()))
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, &a);
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        self.forward_impl(x, None::<(f64, &mut rand_chacha::ChaCha8Rng)>)
    }

    /// Forward pass with inverted dropout on every hidden activation.
    pub fn forward_cached_dropout<R: Rng + ?Sized>(
        &self,
        x: &DMatrix<f64>,
        drop_prob: f64,
        rng: &mut R,
    ) -> Result<ForwardCache> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(Error::Domain(format!("dropout probability {drop_prob} outside [0, 1)")));
        }
        self.forward_impl(x, Some((drop_prob, rng)))
    }

    fn forward_impl<R: Rng + ?Sized>(
        &self,
        x: &DMatrix<f64>,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<ForwardCache> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(last);
        let mut masks = dropout.as_ref().map(|_| Vec::with_capacity(last));
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, if i == 0 { x } else { &post[i - 1] });
            if i < last {
                let mut a = z.map(|v| v.max(0.0));
                if let (Some((p, rng)), Some(ms)) = (dropout.as_mut(), masks.as_mut()) {
                    let keep = 1.0 / (1.0 - *p);
                    let mask = DMatrix::from_fn(a.nrows(), a.ncols(), |_, _| {
                        if rng.random::<f64>() < *p {
                            0.0
                        } else {
                            keep
                        }
                    });
                    a.component_mul_assign(&mask);
                    ms.push(mask);
                }
                post.push(a);
            }
            pre.push(z);
        }
        Ok(ForwardCache {
            input: x.clone(),
            pre,
            post,
            masks,
        })
    }

    /// Reverse pass for a cached batch. `upstream` holds one column of output
    /// gradients per sample; parameter gradients are summed over the batch.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: &DMatrix<f64>,
    ) -> Result<(GradBuffer, DMatrix<f64>)> {
        let mut grads = GradBuffer::zeros_like(self);
        let dx = self.backprop(cache, upstream, Some(&mut grads))?;
        Ok((grads, dx))
    }

    /// Gradient with respect to the input only.
    pub fn input_gradient_batch(
        &self,
        cache: &ForwardCache,
        upstream: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        self.backprop(cache, upstream, None)
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        upstream: &DMatrix<f64>,
        mut grads: Option<&mut GradBuffer>,
    ) -> Result<DMatrix<f64>> {
        if upstream.nrows() != self.output_dim() {
            return Err(Error::dim("upstream gradient rows", self.output_dim(), upstream.nrows()));
        }
        if upstream.ncols() != cache.batch_size() {
            return Err(Error::dim("upstream gradient columns", cache.batch_size(), upstream.ncols()));
        }
        let mut delta = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let a_prev = if i == 0 { &cache.input } else { &cache.post[i - 1] };
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[i];
                gl.weights.gemm(1.0, &delta, &a_prev.transpose(), 0.0);
                gl.bias = delta.column_sum();
            }
            let mut back = layer.weights.tr_mul(&delta);
            if i > 0 {
                let z = &cache.pre[i - 1];
                back.zip_apply(z, |d, zv| {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                });
                if let Some(masks) = &cache.masks {
                    back.component_mul_assign(&masks[i - 1]);
                }
            }
            delta = back;
        }
        Ok(delta)
    }

    /// Copy with fixed dropout masks folded into the weights: hidden unit `j`
    /// of hidden layer `l` is removed when `masks[l][j]` is false and the
    /// survivors are rescaled by `1/(1-p)`.
    pub fn with_hidden_mask(&self, masks: &[Vec<bool>], drop_prob: f64) -> Result<MlpParams> {
        let hidden = self.layers.len() - 1;
        if masks.len() != hidden {
            return Err(Error::dim("dropout mask layers", hidden, masks.len()));
        }
        let keep = 1.0 / (1.0 - drop_prob);
        let mut out = self.clone();
        for (l, mask) in masks.iter().enumerate() {
            let next = &mut out.layers[l + 1].weights;
            if mask.len() != next.ncols() {
                return Err(Error::dim("dropout mask width", next.ncols(), mask.len()));
            }
            for (j, &kept) in mask.iter().enumerate() {
                let scale = if kept { keep } else { 0.0 };
                next.column_mut(j).scale_mut(scale);
            }
        }
        Ok(out)
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), x.nrows()));
        }
        Ok(())
    }
}

fn affine(layer: &Layer, a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = &layer.weights * a;
    for mut col in z.column_iter_mut() {
        col += &layer.bias;
    }
    z
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::Domain("network needs input and output widths".into()));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::Domain(format!("zero layer width in {widths:?}")));
    }
    Ok(())
}

/// Gradients, shape-congruent with the [`MlpParams`] they were computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    layers: Vec<Layer>,
}

impl GradBuffer {
    pub fn zeros_like(params: &MlpParams) -> Self {
        GradBuffer {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut widths = vec![self.layers[0].fan_in()];
        widths.extend(self.layers.iter().map(Layer::fan_out));
        widths
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn len(&self) -> usize {
        self.tensors().map(<[f64]>::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// `self += k * params`, used for weight penalties.
    pub fn add_scaled_params(&mut self, params: &MlpParams, k: f64) {
        for (g, p) in self.tensors_mut().zip(params.tensors()) {
            for (gv, pv) in g.iter_mut().zip(p) {
                *gv += k * pv;
            }
        }
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (g, o) in self.tensors_mut().zip(other.tensors()) {
            for (gv, ov) in g.iter_mut().zip(o) {
                *gv += ov;
            }
        }
    }

    /// Global Euclidean norm over all tensors.
    pub fn l2_norm(&self) -> f64 {
        self.tensors().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean absolute entry over all tensors.
    pub fn mean_abs(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        self.tensors().flatten().map(|v| v.abs()).sum::<f64>() / n as f64
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().flatten().all(|v| v.is_finite())
    }

    /// Flat copy in [`MlpParams::tensors`] order.
    pub fn to_vec(&self) -> Vec<f64> {
        self.tensors().flatten().copied().collect()
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    /// Row-major weights, `fan_out` rows of `fan_in` entries.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpRecord {
    widths: Vec<usize>,
    layers: Vec<LayerRecord>,
}

impl From<MlpParams> for MlpRecord {
    fn from(p: MlpParams) -> Self {
        MlpRecord {
            widths: p.widths(),
            layers: p
                .layers
                .iter()
                .map(|l| LayerRecord {
                    weights: l
                        .weights
                        .row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect(),
                    bias: l.bias.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MlpRecord> for MlpParams {
    type Error = String;

    fn try_from(rec: MlpRecord) -> std::result::Result<Self, String> {
        if rec.widths.len() != rec.layers.len() + 1 {
            return Err(format!(
                "{} widths do not describe {} layers",
                rec.widths.len(),
                rec.layers.len()
            ));
        }
        let mut layers = Vec::with_capacity(rec.layers.len());
        for (i, l) in rec.layers.into_iter().enumerate() {
            let (fan_in, fan_out) = (rec.widths[i], rec.widths[i + 1]);
            if l.weights.len() != fan_out || l.weights.iter().any(|r| r.len() != fan_in) {
                return Err(format!("layer {i} weights are not {fan_out}x{fan_in}"));
            }
            let flat: Vec<f64> = l.weights.into_iter().flatten().collect();
            layers.push(Layer {
                weights: DMatrix::from_row_slice(fan_out, fan_in, &flat),
                bias: DVector::from_vec(l.bias),
            });
        }
        MlpParams::from_layers(layers).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let net = MlpParams::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let mut net = MlpParams::zeros(&[3, 3]).unwrap();
        net.layers_mut()[0].weights = DMatrix::identity(3, 3);
        let x = [0.3, -1.2, 4.0];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn hand_evaluated_two_layer_net() {
        let w1 = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.25, -3.0]);
        let b1 = DVector::from_vec(vec![0.1, -0.2, 0.0]);
        let w2 = DMatrix::from_row_slice(1, 3, &[2.0, -1.0, 0.5]);
        let b2 = DVector::from_vec(vec![0.3]);
        let net = MlpParams::from_layers(vec![
            Layer { weights: w1, bias: b1 },
            Layer { weights: w2, bias: b2 },
        ])
        .unwrap();
        // straight-line evaluation at x = (1, -1)
        let h0 = (1.0 * 1.0 + 2.0 * -1.0 + 0.1_f64).max(0.0); // -0.9 -> 0
        let h1 = (-1.0 * 1.0 + 0.5 * -1.0 - 0.2_f64).max(0.0); // -1.7 -> 0
        let h2 = (0.25 * 1.0 + -3.0 * -1.0 + 0.0_f64).max(0.0); // 3.25
        let expected = 2.0 * h0 - h1 + 0.5 * h2 + 0.3;
        let out = net.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0] - expected).abs() < 1e-15);
        assert!((out[0] - 1.925).abs() < 1e-12);
    }

    #[test]
    fn input_width_mismatch_is_dimension_error() {
        let net = MlpParams::zeros(&[3, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
        assert!(matches!(
            net.backward(&[1.0, 2.0, 3.0], &[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn linear_layer_gradients() {
        let mut r = rng(1);
        let net = MlpParams::new(&[3, 2], &mut r).unwrap();
        let x = [0.5, -1.0, 2.0];
        let u = [1.5, -0.5];
        let (g, dx) = net.backward(&x, &u).unwrap();
        let gl = &g.layers()[0];
        for i in 0..2 {
            for j in 0..3 {
                assert!((gl.weights[(i, j)] - u[i] * x[j]).abs() < 1e-15);
            }
            assert_eq!(gl.bias[i], u[i]);
        }
        let w = &net.layers()[0].weights;
        for j in 0..3 {
            let expected = u[0] * w[(0, j)] + u[1] * w[(1, j)];
            assert!((dx[j] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = MlpParams::new(&[4, 8, 3], &mut rng(2)).unwrap();
        let (g, dx) = net.backward(&[1.0, 2.0, 3.0, 4.0], &[0.0; 3]).unwrap();
        assert_eq!(g.l2_norm(), 0.0);
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_sample_gradients() {
        let net = MlpParams::new(&[2, 6, 2], &mut rng(3)).unwrap();
        let x = DMatrix::from_column_slice(2, 3, &[0.1, 0.2, -0.4, 0.9, 1.5, -0.3]);
        let u = DMatrix::from_column_slice(2, 3, &[1.0, 0.0, -1.0, 2.0, 0.5, 0.5]);
        let cache = net.forward_cached(&x).unwrap();
        let (g, dx) = net.backward_batch(&cache, &u).unwrap();
        let mut sum = GradBuffer::zeros_like(&net);
        for c in 0..3 {
            let (gc, dxc) = net
                .backward(x.column(c).as_slice(), u.column(c).as_slice())
                .unwrap();
            sum.add_assign(&gc);
            for r in 0..2 {
                assert!((dx[(r, c)] - dxc[r]).abs() < 1e-14);
            }
        }
        for (a, b) in g.tensors().flatten().zip(sum.tensors().flatten()) {
            assert!((a - b).abs() < 1e-13);
        }
        let dx_only = net.input_gradient_batch(&cache, &u).unwrap();
        assert_eq!(dx_only, dx);
    }

    #[test]
    fn folded_mask_matches_masked_forward() {
        let net = MlpParams::new(&[2, 5, 4, 1], &mut rng(4)).unwrap();
        let masks = vec![
            vec![true, false, true, true, false],
            vec![false, true, true, true],
        ];
        let folded = net.with_hidden_mask(&masks, 0.25).unwrap();
        let x = [0.7, -0.2];
        // manual masked evaluation
        let mut a = DMatrix::from_column_slice(2, 1, &x);
        for (i, layer) in net.layers().iter().enumerate() {
            let mut z = affine(layer, &a);
            if i < 2 {
                z.apply(|v| *v = v.max(0.0));
                for (j, &keep) in masks[i].iter().enumerate() {
                    z[(j, 0)] *= if keep { 1.0 / 0.75 } else { 0.0 };
                }
            }
            a = z;
        }
        let out = folded.forward(&x).unwrap();
        assert!((out[0] - a[(0, 0)]).abs() < 1e-14);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let net = MlpParams::new(&[3, 7, 2], &mut rng(5)).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: MlpParams = serde_json::from_str(&text).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn soft_update_limits() {
        let live = MlpParams::new(&[2, 3, 1], &mut rng(6)).unwrap();
        let mut target = MlpParams::new(&[2, 3, 1], &mut rng(7)).unwrap();
        let before = target.clone();
        target.soft_update_from(&live, 0.0).unwrap();
        assert_eq!(target, before);
        target.soft_update_from(&live, 1.0).unwrap();
        assert_eq!(target, live);
    }
}
