//! Small dense-layer toolkit shared by every learnable stage.
//!
//! Activations are row-major batches (`batch × features`). Every layer owns a
//! `backward` that accumulates parameter gradients into a same-shaped gradient
//! struct and returns the gradient with respect to its input.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn uniform_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, fan_in: usize) -> Array1<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array1::from_shape_simple_fn(len, || dist.sample(rng))
}

/// Affine map `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        Self {
            weight: uniform_fan_in(rng, input, output, input),
            bias: uniform_vec(rng, output, input),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }

    pub fn check_input(&self, len: usize, what: &str) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::dim(format!(
                "{what}: expected input length {}, got {len}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn forward_vec(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates `dW += xᵀ dy`, `db += Σ dy` and returns `dy Wᵀ`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [f64])) {
        f(format!("{prefix}.weight"), self.weight.as_slice().expect("standard layout"));
        f(format!("{prefix}.bias"), self.bias.as_slice().expect("standard layout"));
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(format!("{prefix}.weight"), self.weight.as_slice_mut().expect("standard layout"));
        f(format!("{prefix}.bias"), self.bias.as_slice_mut().expect("standard layout"));
    }
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Masks `dy` by the activation pattern of a ReLU output.
pub fn relu_backward(out: &Array2<f64>, dy: &mut Array2<f64>) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

/// Max-subtracted softmax written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Gradient of a softmax given its output `p` and upstream `dp`.
pub fn softmax_backward(p: &[f64], dp: &[f64], dlogits: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((dl, &pi), &dpi) in dlogits.iter_mut().zip(p).zip(dp) {
        *dl = pi * (dpi - dot);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
