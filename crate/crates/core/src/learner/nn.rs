//! Dense networks with explicit backward passes.
//!
//! An [`Mlp`] is a stack of affine layers with ReLU between them and an
//! optional layer normalization in front of the output layer. Gradients are
//! accumulated into a zero-initialized [`Mlp`] of the same shape, which also
//! serves as the moment storage of the optimizer.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Uniform fan-in initialization.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            w: Array2::from_shape_simple_fn((output, input), || dist.sample(rng)),
            b: Array1::from_shape_simple_fn(output, || dist.sample(rng)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    /// Returns `(output, normalized, inverse std per row)`.
    pub fn forward(&self, h: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let d = h.ncols() as f64;
        let mean = h.mean_axis(Axis(1)).expect("nonempty rows");
        let centered = h - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let normalized = centered * inv.view().insert_axis(Axis(1));
        let out = &normalized * &self.gain + &self.bias;
        (out, normalized, inv)
    }
}

/// Layer normalization of a single vector with unit gain and zero offset.
pub fn layer_norm(h: &[f64]) -> Vec<f64> {
    let d = h.len() as f64;
    let mean = h.iter().sum::<f64>() / d;
    let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    h.iter().map(|v| (v - mean) * inv).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Applied to the features entering the last layer.
    pub norm: Option<LayerNorm>,
}

pub struct MlpCache {
    /// Input of every layer; the last entry is the (normalized) input of the output layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-normalization features, normalized features and inverse std.
    ln: Option<(Array2<f64>, Array2<f64>, Array1<f64>)>,
}

impl MlpCache {
    /// Features fed to the output layer (after normalization when present).
    pub fn last_features(&self) -> &Array2<f64> {
        self.inputs.last().expect("at least one layer")
    }
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], layer_norm: bool, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        let norm = layer_norm.then(|| LayerNorm::new(sizes[sizes.len() - 2]));
        Self { layers, norm }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
            norm: self.norm.as_ref().map(|n| LayerNorm {
                gain: Array1::zeros(n.gain.raw_dim()),
                bias: Array1::zeros(n.bias.raw_dim()),
            }),
        }
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut h = x.clone();
        for layer in &self.layers[..n - 1] {
            let mut z = layer.forward(&h);
            z.mapv_inplace(|v| v.max(0.0));
            inputs.push(std::mem::replace(&mut h, z));
        }
        let ln = if let Some(norm) = &self.norm {
            let (out, normalized, inv) = norm.forward(&h);
            let pre = std::mem::replace(&mut h, out);
            Some((pre, normalized, inv))
        } else {
            None
        };
        let y = self.layers[n - 1].forward(&h);
        inputs.push(h);
        (y, MlpCache { inputs, ln })
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    /// Backpropagates `grad_out`; accumulates parameter gradients into `grads`
    /// when given and returns the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &Array2<f64>,
        mut grads: Option<&mut Mlp>,
    ) -> Array2<f64> {
        let n = self.layers.len();
        let mut g = grad_out.clone();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            if let Some(gr) = grads.as_deref_mut() {
                gr.layers[i].w += &g.t().dot(input);
                gr.layers[i].b += &g.sum_axis(Axis(0));
            }
            let mut gin = g.dot(&layer.w);
            if i == n - 1 {
                if let (Some(norm), Some((_, normalized, inv))) = (&self.norm, &cache.ln) {
                    if let Some(gr) = grads.as_deref_mut() {
                        let ln = gr.norm.as_mut().expect("grad shape matches");
                        ln.gain += &(&gin * normalized).sum_axis(Axis(0));
                        ln.bias += &gin.sum_axis(Axis(0));
                    }
                    let dn = gin * &norm.gain;
                    let d = dn.ncols() as f64;
                    let sum_dn = dn.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let sum_dn_n = (&dn * normalized).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut gh = dn * d - &sum_dn - &(normalized * &sum_dn_n);
                    gh *= &(inv / d).insert_axis(Axis(1));
                    gin = gh;
                }
            }
            if i > 0 {
                // ReLU mask from the post-activation features entering this layer.
                let act = match (&cache.ln, i == n - 1) {
                    (Some((pre, _, _)), true) => pre,
                    _ => &cache.inputs[i],
                };
                gin.zip_mut_with(act, |gv, &av| {
                    if av <= 0.0 {
                        *gv = 0.0
                    }
                });
            }
            g = gin;
        }
        g
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("l{i}.w"), l.w.shape().to_vec(), l.w.as_slice().unwrap()));
            out.push((format!("l{i}.b"), l.b.shape().to_vec(), l.b.as_slice().unwrap()));
        }
        if let Some(n) = &self.norm {
            out.push(("ln.gain".into(), n.gain.shape().to_vec(), n.gain.as_slice().unwrap()));
            out.push(("ln.bias".into(), n.bias.shape().to_vec(), n.bias.as_slice().unwrap()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(l.w.as_slice_mut().unwrap());
            out.push(l.b.as_slice_mut().unwrap());
        }
        if let Some(n) = self.norm.as_mut() {
            out.push(n.gain.as_slice_mut().unwrap());
            out.push(n.bias.as_slice_mut().unwrap());
        }
        out
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Mlp, k: f64) {
        let src = other.tensors();
        for (dst, (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, &v) in dst.iter_mut().zip(s) {
                *d += k * v;
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }

    /// `self <- (1 - tau) * self + tau * source`, written as a step toward
    /// `source` so that equal parameters stay bit-identical.
    pub fn polyak_from(&mut self, source: &Mlp, tau: f64) {
        let src = source.tensors();
        for (dst, (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, &v) in dst.iter_mut().zip(s) {
                *d += tau * (v - *d);
            }
        }
    }
}

/// Splits columns `[0, k)` and `[k, n)`.
pub fn split_cols(x: &Array2<f64>, k: usize) -> (Array2<f64>, Array2<f64>) {
    (x.slice(s![.., ..k]).to_owned(), x.slice(s![.., k..]).to_owned())
}

pub fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching rows")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[1.0, -1.0]);
        // Variance 1 with the epsilon floor: 1 / sqrt(1 + 1e-5).
        assert!((out[0] - 1.0).abs() < 1e-5 && (out[1] + 1.0).abs() < 1e-5);
        assert!(layer_norm(&[3.0; 5]).iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let h: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let n: f64 = layer_norm(&h).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 4.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batched_layer_norm_matches_vector_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_fn((3, 7), |_| rng.random_range(-2.0..2.0));
        let (out, _, _) = LayerNorm::new(7).forward(&x);
        for (row, o) in x.rows().into_iter().zip(out.rows()) {
            let v = layer_norm(row.as_slice().unwrap());
            for (a, b) in v.iter().zip(o.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn fd_check(net: &Mlp, x: &Array2<f64>) {
        // Loss = sum of outputs weighted by a fixed matrix.
        let y = net.forward(x);
        let weights = Array2::from_shape_fn(y.raw_dim(), |(i, j)| 0.3 + 0.1 * i as f64 - 0.2 * j as f64);
        let loss = |m: &Mlp| (m.forward(x) * &weights).sum();
        let (_, cache) = net.forward_cached(x);
        let mut grads = net.zeros_like();
        let gx = net.backward(&cache, &weights, Some(&mut grads));
        let h = 1e-6;
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.2.to_vec()).collect();
        let mut probe = net.clone();
        for (ti, tensor) in analytic.iter().enumerate() {
            for (k, &a) in tensor.iter().enumerate() {
                let orig = probe.tensors()[ti].2[k];
                probe.tensors_mut()[ti][k] = orig + h;
                let up = loss(&probe);
                probe.tensors_mut()[ti][k] = orig - h;
                let down = loss(&probe);
                probe.tensors_mut()[ti][k] = orig;
                let num = (up - down) / (2.0 * h);
                assert!((a - num).abs() <= 1e-6 * (1.0 + a.abs()), "tensor {ti}[{k}]: {a} vs {num}");
            }
        }
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let up = (net.forward(&xp) * &weights).sum();
                xp[[i, j]] -= 2.0 * h;
                let down = (net.forward(&xp) * &weights).sum();
                let num = (up - down) / (2.0 * h);
                assert!((gx[[i, j]] - num).abs() <= 1e-6 * (1.0 + num.abs()));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &ln in &[false, true] {
            let net = Mlp::new(&[5, 6, 4, 3], ln, &mut rng);
            let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
            fd_check(&net, &x);
        }
        let single = Mlp::new(&[3, 2], false, &mut rng);
        let x = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        fd_check(&single, &x);
    }
}
