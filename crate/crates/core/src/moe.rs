//! Dense mixture-of-experts fusion and the hazard head.
//!
//! Every expert sees the full fused vector; a softmax gate scales each expert
//! output and the scaled outputs are concatenated in expert order.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, sigmoid, softmax_backward, softmax_into, uniform_fan_in, Linear};

/// Expert weights on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights(pub Vec<f64>);

impl GateWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Two-layer expert: `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub first: Linear,
    pub second: Linear,
}

impl ExpertParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, width: usize) -> Self {
        Self {
            first: Linear::init(rng, input, width),
            second: Linear::init(rng, width, width),
        }
    }

    pub fn zeros(input: usize, width: usize) -> Self {
        Self {
            first: Linear::zeros(input, width),
            second: Linear::zeros(width, width),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.first.input_dim(), self.second.output_dim())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    /// `(F·C2) × N` gate matrix.
    pub gate: Array2<f64>,
    pub experts: Vec<ExpertParams>,
    /// `(N·C2) → n_bins` hazard head.
    pub head: Linear,
}

impl MoeParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, width: usize, n_experts: usize, n_bins: usize) -> Self {
        let gate = uniform_fan_in(rng, input, n_experts, input);
        let experts = (0..n_experts).map(|_| ExpertParams::init(rng, input, width)).collect();
        let head = Linear::init(rng, n_experts * width, n_bins);
        Self { gate, experts, head }
    }

    pub fn zeros(input: usize, width: usize, n_experts: usize, n_bins: usize) -> Self {
        Self {
            gate: Array2::zeros((input, n_experts)),
            experts: (0..n_experts).map(|_| ExpertParams::zeros(input, width)).collect(),
            head: Linear::zeros(n_experts * width, n_bins),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.expert_width(), self.n_experts(), self.head.output_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.gate.nrows()
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn expert_width(&self) -> usize {
        self.experts.first().map_or(0, |e| e.second.output_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_experts();
        if n == 0 {
            return Err(Error::config("at least one expert is required"));
        }
        if self.gate.ncols() != n {
            return Err(Error::dim(format!("gate has {} outputs for {n} experts", self.gate.ncols())));
        }
        if self.head.input_dim() != n * self.expert_width() {
            return Err(Error::dim("head input must equal N times the expert width"));
        }
        Ok(())
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [f64])) {
        f(format!("{prefix}.gate"), self.gate.as_slice().expect("contiguous"));
        for (i, e) in self.experts.iter().enumerate() {
            e.first.visit(&format!("{prefix}.expert{i}.first"), f);
            e.second.visit(&format!("{prefix}.expert{i}.second"), f);
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(format!("{prefix}.gate"), self.gate.as_slice_mut().expect("contiguous"));
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.first.visit_mut(&format!("{prefix}.expert{i}.first"), f);
            e.second.visit_mut(&format!("{prefix}.expert{i}.second"), f);
        }
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }

    pub fn forward_batch(&self, fused: &ArrayView2<f64>) -> (Array2<f64>, MoeCache) {
        let batch = fused.nrows();
        let width = self.expert_width();
        let logits = fused.dot(&self.gate);
        let mut gates = Array2::zeros(logits.raw_dim());
        for (l, mut g) in logits.rows().into_iter().zip(gates.rows_mut()) {
            softmax_into(&l.to_vec(), g.as_slice_mut().expect("contiguous"));
        }
        let mut hidden = Vec::with_capacity(self.n_experts());
        let mut outputs = Vec::with_capacity(self.n_experts());
        let mut fused_out = Array2::zeros((batch, self.n_experts() * width));
        for (i, e) in self.experts.iter().enumerate() {
            let mut h = e.first.forward(fused);
            relu_inplace(&mut h);
            let y = e.second.forward(&h.view());
            let mut block = fused_out.slice_mut(s![.., i * width..(i + 1) * width]);
            block.assign(&y);
            block *= &gates.column(i).insert_axis(Axis(1));
            hidden.push(h);
            outputs.push(y);
        }
        (
            fused_out,
            MoeCache {
                gates,
                hidden,
                outputs,
            },
        )
    }

    /// Backward through gate and experts; returns the gradient for the fused input.
    pub fn backward_batch(
        &self,
        fused: &ArrayView2<f64>,
        cache: &MoeCache,
        dout: &ArrayView2<f64>,
        grad: &mut MoeParams,
    ) -> Array2<f64> {
        let width = self.expert_width();
        let mut dfused = Array2::zeros(fused.raw_dim());
        let mut dgates = Array2::zeros(cache.gates.raw_dim());
        for (i, e) in self.experts.iter().enumerate() {
            let dblock = dout.slice(s![.., i * width..(i + 1) * width]);
            let y = &cache.outputs[i];
            for (b, (dr, yr)) in dblock.rows().into_iter().zip(y.rows()).enumerate() {
                dgates[[b, i]] = dr.dot(&yr);
            }
            let dy = &dblock * &cache.gates.column(i).insert_axis(Axis(1));
            let h = &cache.hidden[i];
            let mut dh = e.second.backward(&h.view(), &dy.view(), &mut grad.experts[i].second);
            relu_backward(h, &mut dh);
            dfused += &e.first.backward(fused, &dh.view(), &mut grad.experts[i].first);
        }
        let mut dlogits = Array2::zeros(dgates.raw_dim());
        for ((g, dg), mut dl) in cache.gates.rows().into_iter().zip(dgates.rows()).zip(dlogits.rows_mut()) {
            softmax_backward(&g.to_vec(), &dg.to_vec(), dl.as_slice_mut().expect("contiguous"));
        }
        ndarray::linalg::general_mat_mul(1.0, &fused.t(), &dlogits, 1.0, &mut grad.gate);
        dfused += &dlogits.dot(&self.gate.t());
        dfused
    }
}

#[derive(Debug, Clone)]
pub struct MoeCache {
    pub gates: Array2<f64>,
    hidden: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

pub fn gate(fused: &ArrayView1<f64>, weights: &ArrayView2<f64>) -> Result<GateWeights> {
    if fused.len() != weights.nrows() {
        return Err(Error::dim(format!(
            "gate expects input length {}, got {}",
            weights.nrows(),
            fused.len()
        )));
    }
    let logits = fused.dot(weights);
    let mut g = vec![0.0; logits.len()];
    softmax_into(&logits.to_vec(), &mut g);
    Ok(GateWeights(g))
}

pub fn expert_forward(fused: &ArrayView1<f64>, expert: &ExpertParams) -> Result<Array1<f64>> {
    expert.first.check_input(fused.len(), "expert")?;
    let h = expert.first.forward_vec(fused).mapv(|x| x.max(0.0));
    Ok(expert.second.forward_vec(&h.view()))
}

/// Gate-weighted concatenation of all expert outputs.
pub fn moe_fuse(fused: &ArrayView1<f64>, params: &MoeParams) -> Result<Array1<f64>> {
    params.validate()?;
    let g = gate(fused, &params.gate.view())?;
    let mut out = Vec::with_capacity(params.n_experts() * params.expert_width());
    for (gi, e) in g.0.iter().zip(&params.experts) {
        out.extend(expert_forward(fused, e)?.iter().map(|y| gi * y));
    }
    Ok(Array1::from(out))
}

/// Per-bin hazards `sigmoid(x W + b)`.
pub fn predict_hazards(fused: &ArrayView1<f64>, head: &Linear) -> Result<Array1<f64>> {
    head.check_input(fused.len(), "hazard head")?;
    Ok(head.forward_vec(fused).mapv(sigmoid))
}
