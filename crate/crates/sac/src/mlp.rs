//! Dense multilayer perceptron with tanh hidden layers, a linear output
//! layer and hand-written reverse-mode gradients.
//!
//! Batches are stored column-wise: an input batch is `in_dim × batch`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MlpError {
    #[error("network shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("layers do not chain: {0}")]
    BadLayers(String),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

/// Activations saved by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; entry 0 is the network input.
    layer_inputs: Vec<DMatrix<f64>>,
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

impl Mlp {
    /// Uniform `±1/√fan_in` initialization.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-bound..bound)));
            biases.push(DVector::from_fn(fan_out, |_, _| rng.gen_range(-bound..bound)));
        }
        Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|p| DMatrix::zeros(p[1], p[0])).collect(),
            biases: sizes.windows(2).map(|p| DVector::zeros(p[1])).collect(),
        }
    }

    /// Builds a network from explicit layers; shapes must chain.
    pub fn from_layers(weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self, MlpError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(MlpError::BadLayers(format!(
                "{} weights, {} biases",
                weights.len(),
                biases.len()
            )));
        }
        let mut sizes = vec![weights[0].ncols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != sizes[i] || b.len() != w.nrows() {
                return Err(MlpError::BadLayers(format!(
                    "layer {i} is {}x{} with {} biases after width {}",
                    w.nrows(),
                    w.ncols(),
                    b.len(),
                    sizes[i]
                )));
            }
            sizes.push(w.nrows());
        }
        Ok(Self { sizes, weights, biases })
    }

    pub fn layers(&self) -> impl Iterator<Item = (&DMatrix<f64>, &DVector<f64>)> {
        self.weights.iter().zip(&self.biases)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Zeroes the last layer so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        self.weights.last_mut().unwrap().fill(0.0);
        self.biases.last_mut().unwrap().fill(0.0);
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn layer(&self, i: usize, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights[i] * input;
        for mut col in z.column_iter_mut() {
            col += &self.biases[i];
        }
        if i + 1 < self.weights.len() {
            z.apply(|v| *v = v.tanh());
        }
        z
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = self.layer(0, input);
        for i in 1..self.weights.len() {
            h = self.layer(i, &h);
        }
        h
    }

    pub fn forward_one(&self, input: &DVector<f64>) -> DVector<f64> {
        let out = self.forward(&DMatrix::from_column_slice(input.len(), 1, input.as_slice()));
        out.column(0).into_owned()
    }

    pub fn forward_cached(&self, input: &DMatrix<f64>) -> (DMatrix<f64>, MlpCache) {
        let mut layer_inputs = Vec::with_capacity(self.weights.len());
        let mut h = input.clone();
        for i in 0..self.weights.len() {
            let next = self.layer(i, &h);
            layer_inputs.push(h);
            h = next;
        }
        (h, MlpCache { layer_inputs })
    }

    /// Back-propagates `grad_out = ∂L/∂output` (same shape as the output),
    /// returning parameter gradients and `∂L/∂input`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &DMatrix<f64>) -> (MlpGrads, DMatrix<f64>) {
        let n = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); n];
        let mut gb = vec![DVector::zeros(0); n];
        let mut grad_z = grad_out.clone();
        for i in (0..n).rev() {
            let input = &cache.layer_inputs[i];
            gw[i] = &grad_z * input.transpose();
            gb[i] = grad_z.column_sum();
            let mut grad_in = self.weights[i].transpose() * &grad_z;
            if i > 0 {
                // The input of layer i is tanh of layer i−1's pre-activation.
                grad_in.zip_apply(input, |g, h| *g *= 1.0 - h * h);
            }
            grad_z = grad_in;
        }
        (
            MlpGrads {
                weights: gw,
                biases: gb,
            },
            grad_z,
        )
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), MlpError> {
        if params.len() != self.num_params() {
            return Err(MlpError::ParamCount {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let nw = w.len();
            w.as_mut_slice().copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = b.len();
            b.as_mut_slice().copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// `self ← (1 − τ)·self + τ·online`, element-wise.
    pub fn soft_update(&mut self, online: &Mlp, tau: f64) -> Result<(), MlpError> {
        if self.sizes != online.sizes {
            return Err(MlpError::ShapeMismatch(self.sizes.clone(), online.sizes.clone()));
        }
        for (t, o) in self.weights.iter_mut().zip(&online.weights) {
            t.zip_apply(o, |a, b| *a = (1.0 - tau) * *a + tau * b);
        }
        for (t, o) in self.biases.iter_mut().zip(&online.biases) {
            t.zip_apply(o, |a, b| *a = (1.0 - tau) * *a + tau * b);
        }
        Ok(())
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Applies one step to a network given its gradients.
    pub fn step_mlp(&mut self, net: &mut Mlp, grads: &MlpGrads) {
        let mut params = net.params();
        self.step(&mut params, &grads.flatten());
        net.set_params(&params).expect("optimizer sized for this network");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 4, 2], &mut rng);
        let x = DMatrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
        let weights = DMatrix::from_fn(2, 5, |_, _| rng.gen_range(-1.0..1.0));
        let loss = |n: &Mlp, x: &DMatrix<f64>| n.forward(x).component_mul(&weights).sum();
        let (_, cache) = net.forward_cached(&x);
        let (grads, grad_in) = net.backward(&cache, &weights);
        let analytic = grads.flatten();
        let params = net.params();
        let h = 1e-6;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let mut plus = net.clone();
            plus.set_params(&p).unwrap();
            p[i] -= 2.0 * h;
            let mut minus = net.clone();
            minus.set_params(&p).unwrap();
            let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() <= 1e-5 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {}",
                analytic[i]
            );
        }
        for r in 0..3 {
            for c in 0..5 {
                let mut xp = x.clone();
                xp[(r, c)] += h;
                let mut xm = x.clone();
                xm[(r, c)] -= h;
                let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
                assert!((fd - grad_in[(r, c)]).abs() <= 1e-5 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn soft_update_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let online = Mlp::new(&[2, 3, 1], &mut rng);
        let original = Mlp::new(&[2, 3, 1], &mut rng);

        let mut target = original.clone();
        target.soft_update(&online, 1.0).unwrap();
        assert_eq!(target, online);

        let mut target = original.clone();
        target.soft_update(&online, 0.0).unwrap();
        assert_eq!(target, original);

        let mut zero = Mlp::zeros(&[1, 1]);
        let mut one = Mlp::zeros(&[1, 1]);
        one.set_params(&[1.0, 1.0]).unwrap();
        zero.soft_update(&one, 0.005).unwrap();
        assert_eq!(zero.params(), vec![0.005, 0.005]);
    }

    #[test]
    fn soft_update_shape_mismatch() {
        let mut a = Mlp::zeros(&[2, 3, 1]);
        let b = Mlp::zeros(&[2, 4, 1]);
        assert!(matches!(a.soft_update(&b, 0.5), Err(MlpError::ShapeMismatch(..))));
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(&[2, 8, 8, 1], &mut rng);
        net.zero_output_layer();
        assert_eq!(net.forward_one(&DVector::from_vec(vec![0.3, -2.0]))[0], 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut adam = Adam::new(2, 0.05);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            adam.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }
}
