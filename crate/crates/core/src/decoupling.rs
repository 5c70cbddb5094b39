//! Feature decoupling: modality-specific heads, regional cross-attention for
//! the shared and explored features, and the decoupling loss.
//!
//! Regional cross-attention embeds both modality features to `d` dims and forms
//! the outer product `M = [v1, v2]ᵀ [v2, v1]`. Its quadrants are the inter
//! (`v1 v2ᵀ`, `v2 v1ᵀ`) and intra (`v1 v1ᵀ`, `v2 v2ᵀ`) modality regions. Two
//! branches attend over stacked regions with a softmax down each column:
//!
//! * branch A: `[v1, v2] · colsoftmax([M_m1m2; M_m2m2])`, column `j` has logits `a_r · v2_j`
//! * branch B: `[v2, v1] · colsoftmax([M_m1m2, M_m1m1]ᵀ)`, column `i` has logits `b_r · v1_i`
//!
//! where `a = [v1, v2]` and `b = [v2, v1]`. The output is the branch average.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax, Linear};

pub const FEATURE_NAMES: [&str; 4] = ["sp1", "sp2", "share", "explore"];

/// The four decoupled features; `explore` is absent under the no-explore ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledBundle {
    pub sp1: Array1<f64>,
    pub sp2: Array1<f64>,
    pub share: Array1<f64>,
    pub explore: Option<Array1<f64>>,
}

impl DecoupledBundle {
    pub fn arity(&self) -> usize {
        if self.explore.is_some() {
            4
        } else {
            3
        }
    }

    pub fn dim(&self) -> usize {
        self.sp1.len()
    }

    /// Features in canonical order `sp1, sp2, share[, explore]`.
    pub fn features(&self) -> Vec<ArrayView1<'_, f64>> {
        let mut v = vec![self.sp1.view(), self.sp2.view(), self.share.view()];
        if let Some(e) = &self.explore {
            v.push(e.view());
        }
        v
    }

    /// `[sp1 | sp2 | share | explore]`.
    pub fn concat(&self) -> Vec<f64> {
        self.features().iter().flat_map(|f| f.iter().copied()).collect()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            sp1: &self.sp1 * k,
            sp2: &self.sp2 * k,
            share: &self.share * k,
            explore: self.explore.as_ref().map(|e| e * k),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = Array1::zeros(self.dim());
        Self {
            sp1: z.clone(),
            sp2: z.clone(),
            share: z.clone(),
            explore: self.explore.as_ref().map(|_| z),
        }
    }
}

/// Two independent embedding layers, one per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct RcaParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl RcaParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, c1: usize, c2: usize) -> Self {
        Self {
            fc1: Linear::init(rng, c1, c2),
            fc2: Linear::init(rng, c1, c2),
        }
    }

    pub fn zeros(c1: usize, c2: usize) -> Self {
        Self {
            fc1: Linear::zeros(c1, c2),
            fc2: Linear::zeros(c1, c2),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.fc1.input_dim(), self.fc1.output_dim())
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [f64])) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

/// Modality-specific head: `relu(V W + b)`.
pub fn specific_head(v_m: &ArrayView1<f64>, head: &Linear) -> Result<Array1<f64>> {
    head.check_input(v_m.len(), "specific head")?;
    Ok(head.forward_vec(v_m).mapv(|x| x.max(0.0)))
}

/// Attention weights and outputs of one cross-attention core evaluation.
#[derive(Debug, Clone)]
pub struct RcaCore {
    /// Branch A weights, `d × 2d`, row `j` is column `j` of the stacked-region softmax.
    pub weights_a: Vec<f64>,
    pub weights_b: Vec<f64>,
    pub branch_a: Vec<f64>,
    pub branch_b: Vec<f64>,
    pub output: Vec<f64>,
}

impl RcaCore {
    fn weights(raw: &[f64], d: usize) -> Array2<f64> {
        Array2::from_shape_fn((2 * d, d), |(r, j)| raw[j * 2 * d + r])
    }

    /// Branch A softmax matrix in its stacked `2d × d` orientation.
    pub fn column_softmax_a(&self) -> Array2<f64> {
        Self::weights(&self.weights_a, self.output.len())
    }

    pub fn column_softmax_b(&self) -> Array2<f64> {
        Self::weights(&self.weights_b, self.output.len())
    }
}

fn attend(x: &[f64], queries: &[f64], scale: f64, probs: &mut [f64], out: &mut [f64]) {
    let n = x.len();
    // logits are rank one, so the column maximum sits at an extreme of x
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    for (j, &q) in queries.iter().enumerate() {
        let p = &mut probs[j * n..(j + 1) * n];
        let qs = q * scale;
        let max = if qs >= 0.0 { qs * hi } else { qs * lo };
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (pr, &xr) in p.iter_mut().zip(x) {
            let e = (xr * qs - max).exp();
            *pr = e;
            sum += e;
            weighted += e * xr;
        }
        let inv = 1.0 / sum;
        for pr in p.iter_mut() {
            *pr *= inv;
        }
        out[j] = weighted * inv;
    }
}

fn attend_backward(
    x: &[f64],
    queries: &[f64],
    scale: f64,
    probs: &[f64],
    out: &[f64],
    g: &[f64],
    dx: &mut [f64],
    dq: &mut [f64],
) {
    let n = x.len();
    for (j, &q) in queries.iter().enumerate() {
        let gj = g[j];
        if gj == 0.0 {
            continue;
        }
        let p = &probs[j * n..(j + 1) * n];
        let y = out[j];
        let qs = q * scale;
        let mut acc = 0.0;
        for r in 0..n {
            let t = p[r] * (x[r] - y);
            dx[r] += gj * (p[r] + t * qs);
            acc += t * x[r];
        }
        dq[j] += gj * scale * acc;
    }
}

/// Largest row shift for which the shared-kernel evaluation stays in normal range.
const SHARED_KERNEL_LIMIT: f64 = 1000.0;

/// Softmax rows of `exp(s·x_i·x_r)` over all `i, r`, written row-major into `probs`.
///
/// The exponent is symmetric in `(i, r)`, so only the upper triangle is
/// exponentiated: `K_ir = exp(s·x_i·x_r - (m_i + m_r)/2)` with `m_i` the row
/// maximum, and row `i` is `K_ir·exp((m_r - M)/2)` renormalised. Returns
/// false, leaving `probs` untouched, when the shifts are too large for that.
fn shared_kernel(x: &[f64], scale: f64, probs: &mut [f64], out: &mut [f64]) -> bool {
    let n = x.len();
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let half: Vec<f64> = x
        .iter()
        .map(|&v| {
            let qs = v * scale;
            0.5 * if qs >= 0.0 { qs * hi } else { qs * lo }
        })
        .collect();
    let top = half.iter().copied().fold(0.0, f64::max);
    if !(2.0 * top <= SHARED_KERNEL_LIMIT) {
        return false;
    }
    for i in 0..n {
        let qs = x[i] * scale;
        let hi_ = half[i];
        let row = &mut probs[i * n..(i + 1) * n];
        for r in i..n {
            row[r] = (qs * x[r] - hi_ - half[r]).exp();
        }
    }
    for i in 1..n {
        for r in 0..i {
            probs[i * n + r] = probs[r * n + i];
        }
    }
    let w: Vec<f64> = half.iter().map(|&h| (h - top).exp()).collect();
    for i in 0..n {
        let row = &mut probs[i * n..(i + 1) * n];
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for ((p, &wr), &xr) in row.iter_mut().zip(&w).zip(x) {
            *p *= wr;
            sum += *p;
            weighted += *p * xr;
        }
        let inv = 1.0 / sum;
        for p in row.iter_mut() {
            *p *= inv;
        }
        out[i] = weighted * inv;
    }
    true
}

/// Cross-attention core on already-embedded `v1`, `v2` (both length `d`).
pub fn rca_core(v1: &[f64], v2: &[f64], scale: f64) -> RcaCore {
    let d = v1.len();
    let a: Vec<f64> = v1.iter().chain(v2).copied().collect();
    let mut weights_a = vec![0.0; 2 * d * d];
    let mut weights_b = vec![0.0; 2 * d * d];
    let mut branch_a = vec![0.0; d];
    let mut branch_b = vec![0.0; d];
    // Both branches attend over the same multiset of keys, and their queries
    // together are exactly those keys.
    let mut probs = vec![0.0; 4 * d * d];
    let mut pooled = vec![0.0; 2 * d];
    if shared_kernel(&a, scale, &mut probs, &mut pooled) {
        let n = 2 * d;
        weights_a.copy_from_slice(&probs[d * n..]);
        branch_a.copy_from_slice(&pooled[d..]);
        for i in 0..d {
            let src = &probs[i * n..(i + 1) * n];
            let dst = &mut weights_b[i * n..(i + 1) * n];
            dst[..d].copy_from_slice(&src[d..]);
            dst[d..].copy_from_slice(&src[..d]);
        }
        branch_b.copy_from_slice(&pooled[..d]);
    } else {
        let b: Vec<f64> = v2.iter().chain(v1).copied().collect();
        attend(&a, v2, scale, &mut weights_a, &mut branch_a);
        attend(&b, v1, scale, &mut weights_b, &mut branch_b);
    }
    let output = branch_a.iter().zip(&branch_b).map(|(x, y)| 0.5 * (x + y)).collect();
    RcaCore {
        weights_a,
        weights_b,
        branch_a,
        branch_b,
        output,
    }
}

/// Gradients of the core with respect to `v1` and `v2` given `d output`.
pub fn rca_core_backward(v1: &[f64], v2: &[f64], scale: f64, core: &RcaCore, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = v1.len();
    let a: Vec<f64> = v1.iter().chain(v2).copied().collect();
    let b: Vec<f64> = v2.iter().chain(v1).copied().collect();
    let g: Vec<f64> = dout.iter().map(|x| 0.5 * x).collect();
    let mut da = vec![0.0; 2 * d];
    let mut db = vec![0.0; 2 * d];
    let mut dv1 = vec![0.0; d];
    let mut dv2 = vec![0.0; d];
    attend_backward(&a, v2, scale, &core.weights_a, &core.branch_a, &g, &mut da, &mut dv2);
    attend_backward(&b, v1, scale, &core.weights_b, &core.branch_b, &g, &mut db, &mut dv1);
    for k in 0..d {
        dv1[k] += da[k] + db[d + k];
        dv2[k] += da[d + k] + db[k];
    }
    (dv1, dv2)
}

/// Logit scale for the cross-attention softmax: 1 by default, `1/sqrt(d)` when enabled.
pub fn rca_scale(d: usize, scaled: bool) -> f64 {
    if scaled {
        1.0 / (d as f64).sqrt()
    } else {
        1.0
    }
}

pub fn regional_cross_attention_with(
    v_m1: &ArrayView1<f64>,
    v_m2: &ArrayView1<f64>,
    params: &RcaParams,
    scaled_logits: bool,
) -> Result<Array1<f64>> {
    params.fc1.check_input(v_m1.len(), "cross-attention modality 1")?;
    params.fc2.check_input(v_m2.len(), "cross-attention modality 2")?;
    let v1 = params.fc1.forward_vec(v_m1);
    let v2 = params.fc2.forward_vec(v_m2);
    let core = rca_core(
        v1.as_slice().expect("contiguous"),
        v2.as_slice().expect("contiguous"),
        rca_scale(v1.len(), scaled_logits),
    );
    if core.output.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite cross-attention output".into()));
    }
    Ok(Array1::from(core.output))
}

pub fn regional_cross_attention(v_m1: &ArrayView1<f64>, v_m2: &ArrayView1<f64>, params: &RcaParams) -> Result<Array1<f64>> {
    regional_cross_attention_with(v_m1, v_m2, params, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMetric {
    #[default]
    Mse,
    L1,
    Kl,
    Cos,
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMetric::Mse => "mse",
            DistanceMetric::L1 => "l1",
            DistanceMetric::Kl => "kl",
            DistanceMetric::Cos => "cos",
        })
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Self::Mse),
            "l1" => Ok(Self::L1),
            "kl" => Ok(Self::Kl),
            "cos" => Ok(Self::Cos),
            other => Err(Error::config(format!("unknown distance metric `{other}`"))),
        }
    }
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Distance value with its gradients with respect to both arguments.
pub fn distance_with_grad(u: &[f64], v: &[f64], metric: DistanceMetric) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::dim(format!(
            "distance needs equal nonempty lengths, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let n = u.len() as f64;
    Ok(match metric {
        DistanceMetric::Mse => {
            let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
            let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
            let du: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
            let dv = du.iter().map(|g| -g).collect();
            (value, du, dv)
        }
        DistanceMetric::L1 => {
            let value = u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
            let du: Vec<f64> = u
                .iter()
                .zip(v)
                .map(|(a, b)| {
                    let d = a - b;
                    if d > 0.0 {
                        1.0 / n
                    } else if d < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    }
                })
                .collect();
            let dv = du.iter().map(|g| -g).collect();
            (value, du, dv)
        }
        DistanceMetric::Cos => {
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                log::debug!("cosine distance with a zero vector, treating as orthogonal");
                return Ok((1.0, vec![0.0; u.len()], vec![0.0; v.len()]));
            }
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let cos = dot / (nu * nv);
            let du = u
                .iter()
                .zip(v)
                .map(|(a, b)| -(b / (nu * nv) - cos * a / (nu * nu)))
                .collect();
            let dv = u
                .iter()
                .zip(v)
                .map(|(a, b)| -(a / (nu * nv) - cos * b / (nv * nv)))
                .collect();
            (1.0 - cos, du, dv)
        }
        DistanceMetric::Kl => {
            // 0.5 (KL(p||q) + KL(q||p)) = 0.5 Σ (p - q)(log p - log q)
            let lu = log_softmax(u);
            let lv = log_softmax(v);
            let p = softmax(u);
            let q = softmax(v);
            let d: Vec<f64> = lu.iter().zip(&lv).map(|(a, b)| a - b).collect();
            let value = 0.5 * p.iter().zip(&q).zip(&d).map(|((pi, qi), di)| (pi - qi) * di).sum::<f64>();
            let pd: f64 = p.iter().zip(&d).map(|(a, b)| a * b).sum();
            let qd: f64 = q.iter().zip(&d).map(|(a, b)| a * b).sum();
            let du = (0..u.len())
                .map(|m| 0.5 * p[m] * (d[m] - pd) + 0.5 * (p[m] - q[m]))
                .collect();
            let dv = (0..u.len())
                .map(|m| -0.5 * q[m] * (d[m] - qd) + 0.5 * (q[m] - p[m]))
                .collect();
            (value.max(0.0), du, dv)
        }
    })
}

pub fn distance(u: &[f64], v: &[f64], metric: DistanceMetric) -> Result<f64> {
    distance_with_grad(u, v, metric).map(|(d, _, _)| d)
}

/// Options of the decoupling loss beyond the metric.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecouplingLossOptions {
    pub metric: DistanceMetric,
    /// Caps the subtracted `Dis(sp1, sp2)` term when set.
    pub specific_gap_cap: Option<f64>,
}

/// Decoupling loss value and its gradient with respect to every bundle member.
pub fn decoupling_loss_with_grad(b: &DecoupledBundle, opts: DecouplingLossOptions) -> Result<(f64, DecoupledBundle)> {
    let metric = opts.metric;
    let s = |a: &Array1<f64>| a.as_slice().expect("contiguous").to_vec();
    let (sp1, sp2, share) = (s(&b.sp1), s(&b.sp2), s(&b.share));
    let mut g = b.zeros_like();
    let mut loss = 0.0;

    let add = |x: &[f64], y: &[f64], sign: f64, gx: &mut Array1<f64>, gy: &mut Array1<f64>| -> Result<f64> {
        let (d, dx, dy) = distance_with_grad(x, y, metric)?;
        gx.zip_mut_with(&Array1::from(dx), |a, b| *a += sign * b);
        gy.zip_mut_with(&Array1::from(dy), |a, b| *a += sign * b);
        Ok(sign * d)
    };

    let mut gs1 = g.sp1.clone();
    let mut gs2 = g.sp2.clone();
    let mut gsh = g.share.clone();
    loss += add(&sp1, &share, 1.0, &mut gs1, &mut gsh)?;
    loss += add(&sp2, &share, 1.0, &mut gs2, &mut gsh)?;
    if let Some(explore) = &b.explore {
        let ex = s(explore);
        let mut gex = Array1::zeros(ex.len());
        loss += add(&sp1, &ex, 1.0, &mut gs1, &mut gex)?;
        loss += add(&sp2, &ex, 1.0, &mut gs2, &mut gex)?;
        loss += add(&share, &ex, 1.0, &mut gsh, &mut gex)?;
        g.explore = Some(gex);
    }
    let (gap, dx, dy) = distance_with_grad(&sp1, &sp2, metric)?;
    match opts.specific_gap_cap {
        Some(cap) if gap >= cap => loss -= cap,
        _ => {
            loss -= gap;
            gs1.zip_mut_with(&Array1::from(dx), |a, b| *a -= b);
            gs2.zip_mut_with(&Array1::from(dy), |a, b| *a -= b);
        }
    }
    g.sp1 = gs1;
    g.sp2 = gs2;
    g.share = gsh;
    Ok((loss, g))
}

pub fn decoupling_loss(b: &DecoupledBundle, metric: DistanceMetric) -> Result<f64> {
    decoupling_loss_with_grad(
        b,
        DecouplingLossOptions {
            metric,
            specific_gap_cap: None,
        },
    )
    .map(|(l, _)| l)
}
