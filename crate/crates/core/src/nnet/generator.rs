use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu { slope } => {
                if v > 0.0 {
                    v
                } else {
                    slope * v
                }
            }
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if pre > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }

    fn negative_slope(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu { slope } => slope,
        }
    }
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `out[b] = W in[b] + bias` for every row `b`.
    fn forward(&self, input: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(input.rows(), self.out_dim());
        for (b, x) in input.iter_rows().enumerate() {
            let o = out.row_mut(b);
            for (j, w) in self.weight.iter_rows().enumerate() {
                o[j] = dot(w, x) + self.bias[j];
            }
        }
        out
    }
}

/// The conditional generator: a stack of fully-connected layers taking the
/// concatenation `[x; z]` (length `2d`) to a synthetic feature (length `d`).
/// The activation follows every layer except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub feature_dim: usize,
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

/// Activations saved by a forward pass, consumed by the matching backward.
#[derive(Debug, Clone)]
pub struct GenCache {
    fingerprint: u64,
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenGrads {
    pub layers: Vec<DenseLayer>,
}

impl GenGrads {
    pub fn zeros_like(params: &GeneratorParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.as_slice().iter().all(|v| *v == 0.0) && l.bias.iter().all(|v| *v == 0.0)
        })
    }
}

/// Default hidden widths for a feature dimension `d`: two layers of `2d`.
pub fn default_hidden(feature_dim: usize) -> Vec<usize> {
    vec![2 * feature_dim, 2 * feature_dim]
}

impl GeneratorParams {
    /// Uniform fan-in initialisation: every weight and bias is drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new_random(
        feature_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut RngState,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidConfig("feature dimension must be >= 1".into()));
        }
        let mut widths = vec![2 * feature_dim];
        widths.extend_from_slice(hidden);
        widths.push(feature_dim);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = || (2.0 * rng.uniform() - 1.0) * bound;
                let weight =
                    Matrix::from_vec(out, fan_in, (0..out * fan_in).map(|_| draw()).collect())
                        .expect("shape");
                let bias = (0..out).map(|_| draw()).collect();
                DenseLayer { weight, bias }
            })
            .collect();
        let params = Self {
            feature_dim,
            layers,
            activation,
        };
        params.validate()?;
        Ok(params)
    }

    /// A network computing `x + diag(noise_std) z` exactly, built from hidden
    /// layers of width `2d` that carry `[u; -u]` through the activation
    /// (`act(u) - act(-u) = (1 + slope) u`). `jitter` scales a fan-in uniform
    /// perturbation added to every weight so the network is not perfectly
    /// symmetric.
    pub fn near_identity(
        feature_dim: usize,
        hidden_layers: usize,
        noise_std: &[f64],
        activation: Activation,
        jitter: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        let d = feature_dim;
        if noise_std.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: noise_std.len(),
            });
        }
        let mut params = Self::new_random(d, &vec![2 * d; hidden_layers], activation, rng)?;
        let gain = 1.0 / (1.0 + activation.negative_slope());
        let n_layers = params.layers.len();
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let w = &mut layer.weight;
            for v in w.as_mut_slice() {
                *v *= jitter;
            }
            for v in layer.bias.iter_mut() {
                *v *= jitter;
            }
            let first = l == 0;
            let last = l == n_layers - 1;
            for i in 0..d {
                if first && last {
                    w.set(i, i, w.get(i, i) + 1.0);
                    w.set(i, d + i, w.get(i, d + i) + noise_std[i]);
                } else if first {
                    // [x; z] -> [u; -u] with u = x + S z
                    w.set(i, i, w.get(i, i) + 1.0);
                    w.set(i, d + i, w.get(i, d + i) + noise_std[i]);
                    w.set(d + i, i, w.get(d + i, i) - 1.0);
                    w.set(d + i, d + i, w.get(d + i, d + i) - noise_std[i]);
                } else if last {
                    // [act(u); act(-u)] -> u
                    w.set(i, i, w.get(i, i) + gain);
                    w.set(i, d + i, w.get(i, d + i) - gain);
                } else {
                    // [act(u); act(-u)] -> [u; -u]
                    w.set(i, i, w.get(i, i) + gain);
                    w.set(i, d + i, w.get(i, d + i) - gain);
                    w.set(d + i, i, w.get(d + i, i) - gain);
                    w.set(d + i, d + i, w.get(d + i, d + i) + gain);
                }
            }
        }
        Ok(params)
    }

    pub fn input_dim(&self) -> usize {
        2 * self.feature_dim
    }

    pub fn output_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::InvalidConfig("generator has no layers".into()))?;
        if first.in_dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: first.in_dim(),
            });
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_dim(),
                    found: pair[1].in_dim(),
                });
            }
        }
        let last = self.layers.last().unwrap();
        if last.out_dim() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                found: last.out_dim(),
            });
        }
        for l in &self.layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.out_dim(),
                    found: l.bias.len(),
                });
            }
            if !l.weight.is_finite() || l.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("generator parameters"));
            }
        }
        Ok(())
    }

    /// Order-sensitive hash over every parameter bit, used to match caches.
    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5);
        };
        for l in &self.layers {
            mix(l.out_dim() as u64);
            mix(l.in_dim() as u64);
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                mix(v.to_bits());
            }
        }
        h
    }

    /// Concatenates each row of `xs` with the same row of `zs`.
    pub fn concat_inputs(xs: &Matrix, zs: &Matrix) -> Result<Matrix> {
        if xs.rows() != zs.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} conditioning rows, {} noise rows",
                xs.rows(),
                zs.rows()
            )));
        }
        let mut out = Matrix::zeros(xs.rows(), xs.cols() + zs.cols());
        for b in 0..xs.rows() {
            let row = out.row_mut(b);
            row[..xs.cols()].copy_from_slice(xs.row(b));
            row[xs.cols()..].copy_from_slice(zs.row(b));
        }
        Ok(out)
    }

    /// Forward pass over a batch of concatenated inputs (one `[x; z]` per row).
    pub fn forward_batch(&self, inputs: &Matrix) -> Result<(Matrix, GenCache)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: inputs.cols(),
            });
        }
        let mut cache = GenCache {
            fingerprint: self.fingerprint(),
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut current = inputs.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&current);
            cache.inputs.push(current);
            if l == last {
                return Ok((pre, cache));
            }
            let mut act = pre.clone();
            for v in act.as_mut_slice() {
                *v = self.activation.apply(*v);
            }
            cache.pre.push(pre);
            current = act;
        }
        unreachable!("generator has at least one layer")
    }

    /// Forward pass without keeping a cache.
    pub fn generate(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: inputs.cols(),
            });
        }
        let mut current = self.layers[0].forward(inputs);
        for layer in &self.layers[1..] {
            for v in current.as_mut_slice() {
                *v = self.activation.apply(*v);
            }
            current = layer.forward(&current);
        }
        Ok(current)
    }

    /// `x_hat = G([x; z])` for a single pair.
    pub fn gen_forward(&self, x: &[f64], z: &[f64]) -> Result<(Vec<f64>, GenCache)> {
        for v in [x, z] {
            if v.len() != self.feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.feature_dim,
                    found: v.len(),
                });
            }
        }
        let mut input = x.to_vec();
        input.extend_from_slice(z);
        let input = Matrix::from_vec(1, input.len(), input)?;
        let (out, cache) = self.forward_batch(&input)?;
        Ok((out.into_vec(), cache))
    }

    /// Reverse-mode gradients of a scalar loss whose gradient with respect to
    /// the batch output is `upstream` (one row per sample). Gradients are
    /// summed over the batch.
    pub fn backward_batch(&self, cache: &GenCache, upstream: &Matrix) -> Result<GenGrads> {
        if cache.fingerprint != self.fingerprint() || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        let batch = cache.inputs[0].rows();
        if upstream.rows() != batch || upstream.cols() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream is {}x{}, expected {batch}x{}",
                upstream.rows(),
                upstream.cols(),
                self.output_dim()
            )));
        }
        let mut grads = GenGrads::zeros_like(self);
        let mut delta = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            let g = &mut grads.layers[l];
            for b in 0..batch {
                let d = delta.row(b);
                let x = input.row(b);
                for (j, &dj) in d.iter().enumerate() {
                    if dj != 0.0 {
                        axpy(dj, x, g.weight.row_mut(j));
                        g.bias[j] += dj;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let pre = &cache.pre[l - 1];
            let mut next = Matrix::zeros(batch, layer.in_dim());
            for b in 0..batch {
                let out = next.row_mut(b);
                for (j, &dj) in delta.row(b).iter().enumerate() {
                    if dj != 0.0 {
                        axpy(dj, layer.weight.row(j), out);
                    }
                }
                for (o, &p) in out.iter_mut().zip(pre.row(b)) {
                    *o *= self.activation.derivative(p);
                }
            }
            delta = next;
        }
        Ok(grads)
    }

    /// Single-sample backward, pairing with [`GeneratorParams::gen_forward`].
    pub fn gen_backward(&self, cache: &GenCache, upstream: &[f64]) -> Result<GenGrads> {
        let up = Matrix::from_vec(1, upstream.len(), upstream.to_vec())?;
        self.backward_batch(cache, &up)
    }

    pub(crate) fn segments_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }
}

impl GenGrads {
    pub(crate) fn segments(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_linear(weight: Matrix, bias: Vec<f64>) -> GeneratorParams {
        let d = weight.rows();
        GeneratorParams {
            feature_dim: d,
            layers: vec![DenseLayer { weight, bias }],
            activation: Activation::Relu,
        }
    }

    #[test]
    fn identity_on_x_channel() {
        let d = 3;
        let mut w = Matrix::zeros(d, 2 * d);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        let g = single_linear(w, vec![0.0; d]);
        let (out, _) = g.gen_forward(&[1.0, -2.0, 0.5], &[9.0, 9.0, 9.0]).unwrap();
        assert_eq!(out, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = RngState::new(0);
        let mut g = GeneratorParams::new_random(2, &[4], Activation::Relu, &mut rng).unwrap();
        for l in &mut g.layers {
            l.weight.as_mut_slice().fill(0.0);
            l.bias.fill(0.0);
        }
        g.layers[1].bias = vec![0.25, -1.5];
        let (out, _) = g.gen_forward(&[3.0, 1.0], &[0.1, 0.2]).unwrap();
        assert_eq!(out, vec![0.25, -1.5]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = RngState::new(4);
        let g = GeneratorParams::new_random(4, &default_hidden(4), Activation::default(), &mut rng)
            .unwrap();
        let x = [0.3, -0.1, 2.0, 1.0];
        let z = [1.0, 0.0, -1.0, 0.5];
        let (a, _) = g.gen_forward(&x, &z).unwrap();
        let (b, _) = g.gen_forward(&x, &z).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_checks() {
        let mut rng = RngState::new(4);
        let g = GeneratorParams::new_random(3, &[6], Activation::Relu, &mut rng).unwrap();
        assert!(matches!(
            g.gen_forward(&[1.0, 2.0], &[0.0, 0.0, 0.0]),
            Err(Error::DimensionMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn near_identity_is_exact() {
        for act in [Activation::Relu, Activation::LeakyRelu { slope: 0.1 }] {
            for hidden in 0..3 {
                let mut rng = RngState::new(9);
                let std = [0.5, 0.0, 2.0];
                let g = GeneratorParams::near_identity(3, hidden, &std, act, 0.0, &mut rng).unwrap();
                let x = [1.0, -2.0, 0.25];
                let z = [0.4, 7.0, -1.0];
                let (out, _) = g.gen_forward(&x, &z).unwrap();
                for i in 0..3 {
                    assert!((out[i] - (x[i] + std[i] * z[i])).abs() < 1e-12, "{act:?} {hidden}");
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = RngState::new(1);
        let g = GeneratorParams::new_random(3, &[6, 6], Activation::default(), &mut rng).unwrap();
        let (_, cache) = g.gen_forward(&[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0]).unwrap();
        let grads = g.gen_backward(&cache, &[0.0; 3]).unwrap();
        assert!(grads.is_zero());
    }

    #[test]
    fn linear_quadratic_probe_closed_form() {
        // loss = 0.5 |W [x; z] + b - t|^2  =>  dW = r [x; z]^T, db = r.
        let mut rng = RngState::new(2);
        let g = GeneratorParams::new_random(2, &[], Activation::Relu, &mut rng).unwrap();
        let x = [0.5, -1.0];
        let z = [2.0, 0.3];
        let t = [1.0, 1.0];
        let (out, cache) = g.gen_forward(&x, &z).unwrap();
        let resid: Vec<f64> = out.iter().zip(&t).map(|(o, t)| o - t).collect();
        let grads = g.gen_backward(&cache, &resid).unwrap();
        let input = [x[0], x[1], z[0], z[1]];
        for j in 0..2 {
            assert!((grads.layers[0].bias[j] - resid[j]).abs() < 1e-15);
            for i in 0..4 {
                let want = resid[j] * input[i];
                assert!((grads.layers[0].weight.get(j, i) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = RngState::new(3);
        let mut g = GeneratorParams::new_random(2, &[4], Activation::Relu, &mut rng).unwrap();
        let (_, cache) = g.gen_forward(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        g.layers[0].bias[0] += 1.0;
        assert!(matches!(
            g.gen_backward(&cache, &[1.0, 1.0]),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn validate_catches_bad_chain() {
        let mut rng = RngState::new(3);
        let mut g = GeneratorParams::new_random(2, &[4], Activation::Relu, &mut rng).unwrap();
        g.layers[1].weight = Matrix::zeros(2, 5);
        assert!(g.validate().is_err());
    }
}
