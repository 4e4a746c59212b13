//! Feed-forward Q-network with hand-written backprop, generic over the
//! working scalar type.
//!
//! Nothing here knows about actions or replay; it is plain dense-layer math:
//! forward, reverse-mode gradients for a loss expressed as d(loss)/d(output),
//! Huber loss pieces, and an Adam optimizer. The `agent` module composes
//! these into the DQN update.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::{scalar, Scalar};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NnError {
    #[error("input has dimension {got}, network expects {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("network needs at least one layer")]
    NoLayers,
    #[error("layer {layer} parameter shape does not match ({want} weights expected, got {got})")]
    BadShape { layer: usize, want: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply<F: Scalar>(self, z: F) -> F {
        match self {
            Activation::Relu => {
                if z > F::zero() {
                    z
                } else {
                    F::zero()
                }
            }
            Activation::Linear => z,
        }
    }

    /// Derivative given the pre-activation value.
    #[inline]
    fn derivative<F: Scalar>(self, z: F) -> F {
        match self {
            Activation::Relu => {
                if z > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Linear => F::one(),
        }
    }
}

/// Dense layer: `out = act(W x + b)`, weights stored row-major (out x in).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<F>,
    pub bias: Vec<F>,
    pub activation: Activation,
}

impl<F: Scalar> Layer<F> {
    fn forward_into(&self, input: &[F], preact: &mut Vec<F>, out: &mut Vec<F>) {
        preact.clear();
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut z = self.bias[o];
            for (w, x) in row.iter().zip(input) {
                z += *w * *x;
            }
            preact.push(z);
            out.push(self.activation.apply(z));
        }
    }
}

/// Per-layer gradient accumulator shaped like the network parameters.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub weights: Vec<Vec<F>>,
    pub bias: Vec<Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(net: &QNetwork<F>) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| vec![F::zero(); l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![F::zero(); l.bias.len()]).collect(),
        }
    }

    pub fn scale(&mut self, factor: F) {
        for layer in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            for g in layer {
                *g *= factor;
            }
        }
    }
}

/// Value approximator mapping a state vector to one Q-value per action.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork<F> {
    layers: Vec<Layer<F>>,
}

impl<F: Scalar> QNetwork<F> {
    /// Builds the network from `dims = [input, hidden..., outputs]` with
    /// rectified-linear hidden layers and a linear output layer. Weights are
    /// uniform fan-in scaled, biases zero.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::NoLayers);
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let activation = if i + 2 == dims.len() {
                Activation::Linear
            } else {
                Activation::Relu
            };
            let limit = 1.0 / (in_dim as f64).sqrt();
            let weights = (0..in_dim * out_dim)
                .map(|_| scalar::<F>(rng.gen_range(-limit..limit)))
                .collect();
            layers.push(Layer {
                in_dim,
                out_dim,
                weights,
                bias: vec![F::zero(); out_dim],
                activation,
            });
        }
        Ok(QNetwork { layers })
    }

    /// Assembles a network from explicit parameters (tests, toy fixtures,
    /// checkpoint loading).
    pub fn from_parts(layers: Vec<Layer<F>>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::NoLayers);
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(NnError::BadShape {
                    layer: i,
                    want: l.in_dim * l.out_dim,
                    got: l.weights.len(),
                });
            }
        }
        Ok(QNetwork { layers })
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flattens all parameters (layer by layer, weights then bias).
    pub fn flat_params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[F]) {
        assert_eq!(params.len(), self.param_count());
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
    }

    /// Overwrites this network's parameters with `source`'s (target-network
    /// sync). Shapes must match.
    pub fn copy_params_from(&mut self, source: &QNetwork<F>) {
        assert_eq!(self.dims(), source.dims(), "network shapes differ");
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            dst.weights.copy_from_slice(&src.weights);
            dst.bias.copy_from_slice(&src.bias);
        }
    }

    pub fn forward(&self, input: &[F]) -> Result<Vec<F>, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                got: input.len(),
                want: self.input_dim(),
            });
        }
        let mut current = input.to_vec();
        let mut preact = Vec::new();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&current, &mut preact, &mut next);
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    /// Runs a forward pass and accumulates parameter gradients into `grads`
    /// for a loss with the given gradient at the network output.
    ///
    /// Returns the network output so callers can fold the forward pass into
    /// their loss computation without a second pass.
    pub fn accumulate_gradients(
        &self,
        input: &[F],
        output_grad_of: impl FnOnce(&[F]) -> Vec<F>,
        grads: &mut Gradients<F>,
    ) -> Result<Vec<F>, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                got: input.len(),
                want: self.input_dim(),
            });
        }
        // Forward, keeping every activation and pre-activation.
        let mut activations: Vec<Vec<F>> = vec![input.to_vec()];
        let mut preacts: Vec<Vec<F>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut z = Vec::new();
            let mut a = Vec::new();
            layer.forward_into(activations.last().expect("seeded"), &mut z, &mut a);
            preacts.push(z);
            activations.push(a);
        }
        let output = activations.last().expect("at least one layer").clone();
        let mut delta = output_grad_of(&output);
        assert_eq!(delta.len(), self.output_dim(), "output gradient length");

        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &preacts[idx];
            let a_prev = &activations[idx];
            for (d, zv) in delta.iter_mut().zip(z) {
                *d *= layer.activation.derivative(*zv);
            }
            let gw = &mut grads.weights[idx];
            let gb = &mut grads.bias[idx];
            for o in 0..layer.out_dim {
                let d = delta[o];
                if d != F::zero() {
                    let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (g, x) in row.iter_mut().zip(a_prev) {
                        *g += d * *x;
                    }
                    gb[o] += d;
                }
            }
            if idx > 0 {
                let mut prev_delta = vec![F::zero(); layer.in_dim];
                for o in 0..layer.out_dim {
                    let d = delta[o];
                    if d != F::zero() {
                        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (pd, w) in prev_delta.iter_mut().zip(row) {
                            *pd += d * *w;
                        }
                    }
                }
                delta = prev_delta;
            }
        }
        Ok(output)
    }
}

/// Huber loss of a residual, with the standard quadratic/linear crossover.
pub fn huber<F: Scalar>(residual: F, delta: F) -> F {
    let abs = residual.abs();
    if abs <= delta {
        scalar::<F>(0.5) * residual * residual
    } else {
        delta * (abs - scalar::<F>(0.5) * delta)
    }
}

/// d(huber)/d(residual): the residual clamped to `[-delta, delta]`.
pub fn huber_grad<F: Scalar>(residual: F, delta: F) -> F {
    if residual > delta {
        delta
    } else if residual < -delta {
        -delta
    } else {
        residual
    }
}

/// Adaptive-moment gradient descent over a network's parameters.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    t: u64,
    m: Gradients<F>,
    v: Gradients<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(net: &QNetwork<F>, learning_rate: f64) -> Self {
        Adam {
            lr: scalar(learning_rate),
            beta1: scalar(0.9),
            beta2: scalar(0.999),
            eps: scalar(1e-8),
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    /// Applies one update to `net` in the descent direction of `grads`.
    pub fn step(&mut self, net: &mut QNetwork<F>, grads: &Gradients<F>) {
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t as i32);
        let bc2 = F::one() - self.beta2.powi(self.t as i32);
        for (idx, layer) in net.layers.iter_mut().enumerate() {
            update_slice(
                &mut layer.weights,
                &grads.weights[idx],
                &mut self.m.weights[idx],
                &mut self.v.weights[idx],
                AdamConsts { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, bc1, bc2 },
            );
            update_slice(
                &mut layer.bias,
                &grads.bias[idx],
                &mut self.m.bias[idx],
                &mut self.v.bias[idx],
                AdamConsts { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, bc1, bc2 },
            );
        }
    }
}

#[derive(Clone, Copy)]
struct AdamConsts<F> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    bc1: F,
    bc2: F,
}

fn update_slice<F: Scalar>(params: &mut [F], grads: &[F], m: &mut [F], v: &mut [F], c: AdamConsts<F>) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = c.beta1 * m[i] + (F::one() - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (F::one() - c.beta2) * g * g;
        let m_hat = m[i] / c.bc1;
        let v_hat = v[i] / c.bc2;
        params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let layers = vec![Layer {
            in_dim: 4,
            out_dim: 3,
            weights: vec![0.0f64; 12],
            bias: vec![0.0; 3],
            activation: Activation::Linear,
        }];
        let net = QNetwork::from_parts(layers).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer_reproduces_input() {
        let n = 8;
        let mut weights = vec![0.0f64; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        let net = QNetwork::from_parts(vec![Layer {
            in_dim: n,
            out_dim: n,
            weights,
            bias: vec![0.0; n],
            activation: Activation::Linear,
        }])
        .unwrap();
        let input: Vec<f64> = (0..n).map(|i| i as f64 - 3.5).collect();
        assert_eq!(net.forward(&input).unwrap(), input);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: QNetwork<f64> = QNetwork::new(&[5, 3], &mut rng).unwrap();
        assert_eq!(
            net.forward(&[1.0; 4]).unwrap_err(),
            NnError::DimensionMismatch { got: 4, want: 5 }
        );
    }

    #[test]
    fn forward_matches_independent_matrix_arithmetic() {
        // Independent oracle: the same composition computed with ndarray.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let net: QNetwork<f64> = QNetwork::new(&[6, 5, 4], &mut rng).unwrap();
            let input: Vec<f64> =
                (0..6).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
            let got = net.forward(&input).unwrap();

            let mut x = ndarray::Array1::from(input);
            for layer in net.layers() {
                let w = ndarray::Array2::from_shape_vec(
                    (layer.out_dim, layer.in_dim),
                    layer.weights.clone(),
                )
                .unwrap();
                let b = ndarray::Array1::from(layer.bias.clone());
                x = w.dot(&x) + b;
                if layer.activation == Activation::Relu {
                    x.mapv_inplace(|v| v.max(0.0));
                }
            }
            for (a, b) in got.iter().zip(x.iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn forward_works_at_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net: QNetwork<f32> = QNetwork::new(&[4, 3, 2], &mut rng).unwrap();
        let out = net.forward(&[0.5, -0.5, 1.0, 0.0]).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn huber_shape_and_gradient() {
        assert_eq!(huber(0.5f64, 1.0), 0.125);
        assert_eq!(huber(2.0f64, 1.0), 1.5);
        assert_eq!(huber(-2.0f64, 1.0), 1.5);
        assert_eq!(huber_grad(0.5f64, 1.0), 0.5);
        assert_eq!(huber_grad(3.0f64, 1.0), 1.0);
        assert_eq!(huber_grad(-3.0f64, 1.0), -1.0);
    }

    /// Central finite differences over every parameter; the independent
    /// numerical oracle for the analytic backward pass.
    fn finite_diff_grad(
        net: &QNetwork<f64>,
        input: &[f64],
        loss_of_output: &dyn Fn(&[f64]) -> f64,
    ) -> Vec<f64> {
        let params = net.flat_params();
        let h = 1e-5;
        let mut grad = Vec::with_capacity(params.len());
        let mut probe = net.clone();
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            probe.set_flat_params(&plus);
            let up = loss_of_output(&probe.forward(input).unwrap());
            let mut minus = params.clone();
            minus[i] -= h;
            probe.set_flat_params(&minus);
            let down = loss_of_output(&probe.forward(input).unwrap());
            grad.push((up - down) / (2.0 * h));
        }
        grad
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let net: QNetwork<f64> = QNetwork::new(&[4, 4, 3], &mut rng).unwrap();
            let input: Vec<f64> =
                (0..4).map(|_| rand::Rng::gen_range(&mut rng, -1.5..1.5)).collect();
            let target: f64 = rand::Rng::gen_range(&mut rng, -1.0..1.0);
            let action = rand::Rng::gen_range(&mut rng, 0..3usize);

            // Loss: huber(q[action] - target).
            let loss = move |out: &[f64]| huber(out[action] - target, 1.0);
            let numeric = finite_diff_grad(&net, &input, &loss);

            let mut grads = Gradients::zeros_like(&net);
            net.accumulate_gradients(
                &input,
                |out| {
                    let mut g = vec![0.0; out.len()];
                    g[action] = huber_grad(out[action] - target, 1.0);
                    g
                },
                &mut grads,
            )
            .unwrap();
            let mut analytic = Vec::new();
            for (w, b) in grads.weights.iter().zip(&grads.bias) {
                analytic.extend_from_slice(w);
                analytic.extend_from_slice(b);
            }

            let mut max_rel = 0.0f64;
            for (a, n) in analytic.iter().zip(&numeric) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                max_rel = max_rel.max((a - n).abs() / denom);
            }
            assert!(max_rel < 1e-4, "trial {trial}: max relative error {max_rel}");
        }
    }

    #[test]
    fn adam_reduces_single_sample_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net: QNetwork<f64> = QNetwork::new(&[3, 8, 2], &mut rng).unwrap();
        let mut opt = Adam::new(&net, 1e-2);
        let input = [0.3, -0.7, 1.1];
        let target = 2.5;
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let mut grads = Gradients::zeros_like(&net);
            let out = net
                .accumulate_gradients(
                    &input,
                    |out| {
                        let mut g = vec![0.0; out.len()];
                        g[0] = huber_grad(out[0] - target, 1.0);
                        g
                    },
                    &mut grads,
                )
                .unwrap();
            let loss = huber(out[0] - target, 1.0);
            assert!(loss.is_finite());
            last = loss;
            opt.step(&mut net, &grads);
        }
        assert!(last < 1e-4, "loss after training: {last}");
    }
}
