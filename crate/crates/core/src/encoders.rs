//! Class-token attention pooling over a variable-length token matrix.
//!
//! Tokens are projected to `C1` dims, a learned class token queries them with
//! scaled dot-product attention, and the attended value is the modality
//! feature. Because the class token is the only query, the key map folds into
//! a single vector `u = W_k q` per parameter state, and the value map can be
//! applied after pooling.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax_into, uniform_fan_in, uniform_vec, Linear};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_proj: Linear,
    pub class_token: Array1<f64>,
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
}

/// Per-batch intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    query_vec: Array1<f64>,
    key_query: Array1<f64>,
    projected: Vec<Array2<f64>>,
    attention: Vec<Array1<f64>>,
    pooled: Array2<f64>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, token_dim: usize, c1: usize) -> Self {
        Self {
            token_proj: Linear::init(rng, token_dim, c1),
            class_token: uniform_vec(rng, c1, c1),
            query: uniform_fan_in(rng, c1, c1, c1),
            key: uniform_fan_in(rng, c1, c1, c1),
            value: uniform_fan_in(rng, c1, c1, c1),
        }
    }

    pub fn zeros(token_dim: usize, c1: usize) -> Self {
        Self {
            token_proj: Linear::zeros(token_dim, c1),
            class_token: Array1::zeros(c1),
            query: Array2::zeros((c1, c1)),
            key: Array2::zeros((c1, c1)),
            value: Array2::zeros((c1, c1)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.token_dim(), self.feature_dim())
    }

    pub fn token_dim(&self) -> usize {
        self.token_proj.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.class_token.len()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.feature_dim() as f64).sqrt()
    }

    fn check_tokens(&self, tokens: &ArrayView2<f64>) -> Result<()> {
        if tokens.nrows() == 0 {
            return Err(Error::EmptyInput("token matrix has no rows".into()));
        }
        self.token_proj.check_input(tokens.ncols(), "token matrix")
    }

    pub fn forward_batch(&self, tokens: &[ArrayView2<f64>]) -> Result<(Array2<f64>, EncoderCache)> {
        let c1 = self.feature_dim();
        let query_vec = self.class_token.dot(&self.query);
        let key_query = self.key.dot(&query_vec) * self.scale();
        let mut projected = Vec::with_capacity(tokens.len());
        let mut attention = Vec::with_capacity(tokens.len());
        let mut pooled = Array2::zeros((tokens.len(), c1));
        for (b, x) in tokens.iter().enumerate() {
            self.check_tokens(x)?;
            let p = self.token_proj.forward(x);
            let logits = p.dot(&key_query);
            let mut alpha = Array1::zeros(logits.len());
            softmax_into(
                logits.as_slice().expect("contiguous"),
                alpha.as_slice_mut().expect("contiguous"),
            );
            pooled.row_mut(b).assign(&alpha.dot(&p));
            projected.push(p);
            attention.push(alpha);
        }
        let out = pooled.dot(&self.value);
        Ok((
            out,
            EncoderCache {
                query_vec,
                key_query,
                projected,
                attention,
                pooled,
            },
        ))
    }

    pub fn backward_batch(
        &self,
        tokens: &[ArrayView2<f64>],
        cache: &EncoderCache,
        dout: &ArrayView2<f64>,
        grad: &mut EncoderParams,
    ) {
        let scale = self.scale();
        ndarray::linalg::general_mat_mul(1.0, &cache.pooled.t(), dout, 1.0, &mut grad.value);
        let dpooled = dout.dot(&self.value.t());
        let mut dkey_query: Array1<f64> = Array1::zeros(self.feature_dim());
        for (b, x) in tokens.iter().enumerate() {
            let p = &cache.projected[b];
            let alpha = &cache.attention[b];
            let dc = dpooled.row(b);
            // pooled = αᵀ P, logits = P u
            let dalpha = p.dot(&dc);
            let dot: f64 = alpha.dot(&dalpha);
            let dlogits = alpha * &(dalpha - dot);
            let mut dp = outer(alpha.view(), dc);
            for (mut row, &dl) in dp.rows_mut().into_iter().zip(dlogits.iter()) {
                row.scaled_add(dl, &cache.key_query);
            }
            dkey_query += &p.t().dot(&dlogits);
            self.token_proj.accumulate(x, &dp.view(), &mut grad.token_proj);
        }
        // key_query = scale · W_k q, q = cls W_q
        let du = dkey_query * scale;
        grad.key += &outer(du.view(), cache.query_vec.view());
        let dq = self.key.t().dot(&du);
        grad.query += &outer(self.class_token.view(), dq.view());
        grad.class_token += &self.query.dot(&dq);
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [f64])) {
        self.token_proj.visit(&format!("{prefix}.token_proj"), f);
        f(format!("{prefix}.class_token"), self.class_token.as_slice().expect("contiguous"));
        f(format!("{prefix}.query"), self.query.as_slice().expect("contiguous"));
        f(format!("{prefix}.key"), self.key.as_slice().expect("contiguous"));
        f(format!("{prefix}.value"), self.value.as_slice().expect("contiguous"));
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.token_proj.visit_mut(&format!("{prefix}.token_proj"), f);
        f(format!("{prefix}.class_token"), self.class_token.as_slice_mut().expect("contiguous"));
        f(format!("{prefix}.query"), self.query.as_slice_mut().expect("contiguous"));
        f(format!("{prefix}.key"), self.key.as_slice_mut().expect("contiguous"));
        f(format!("{prefix}.value"), self.value.as_slice_mut().expect("contiguous"));
    }
}

pub(crate) fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Encodes one modality's `I × C0` token matrix into a `C1` feature vector.
pub fn encode_modality(tokens: &ArrayView2<f64>, params: &EncoderParams) -> Result<Array1<f64>> {
    let (out, _) = params.forward_batch(std::slice::from_ref(tokens))?;
    Ok(out.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(c0: usize, c1: usize) -> EncoderParams {
        EncoderParams::init(&mut ChaCha8Rng::seed_from_u64(7), c0, c1)
    }

    #[test]
    fn single_token_returns_value_of_projection() {
        let p = params(3, 5);
        let tokens = Array2::from_shape_vec((1, 3), vec![0.3, -1.2, 0.8]).unwrap();
        let out = encode_modality(&tokens.view(), &p).unwrap();
        let expected = p.token_proj.forward(&tokens.view()).row(0).dot(&p.value);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn token_order_does_not_matter() {
        let p = params(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = uniform_fan_in(&mut rng, 7, 4, 1);
        let reversed = tokens.slice(ndarray::s![..;-1, ..]).to_owned();
        let a = encode_modality(&tokens.view(), &p).unwrap();
        let b = encode_modality(&reversed.view(), &p).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn default_width_output() {
        let p = params(16, 256);
        let tokens = Array2::from_elem((5, 16), 0.1);
        assert_eq!(encode_modality(&tokens.view(), &p).unwrap().len(), 256);
    }

    #[test]
    fn empty_and_misshaped_inputs_are_rejected() {
        let p = params(4, 6);
        let empty = Array2::<f64>::zeros((0, 4));
        assert!(matches!(encode_modality(&empty.view(), &p), Err(Error::EmptyInput(_))));
        let wide = Array2::<f64>::zeros((2, 5));
        assert!(matches!(encode_modality(&wide.view(), &p), Err(Error::Dimension(_))));
    }
}
