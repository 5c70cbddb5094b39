//! Full pipeline: encoders, decoupling, reorganization, fusion, hazards.
//!
//! [`ModelParams`] owns every learnable tensor and exposes them by dotted path.
//! [`Pipeline::loss_and_grad`] runs a batch forward, evaluates the mean
//! training objective and back-propagates it by hand through every stage.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::config::{Ablation, TrainConfig};
use crate::datasets::PatientRecord;
use crate::decoupling::{
    decoupling_loss_with_grad, rca_core, rca_core_backward, rca_scale, DecoupledBundle, DecouplingLossOptions, RcaCore,
    RcaParams,
};
use crate::encoders::{EncoderCache, EncoderParams};
use crate::error::{Error, Result};
use crate::moe::{GateWeights, MoeCache, MoeParams};
use crate::nn::{relu_backward, relu_inplace, sigmoid, Linear};
use crate::reorganize::{build_plan, sample_segment_length, ReorgPlan};
use crate::survival::{nll_with_grad, SurvivalLabel};

#[derive(Debug, Clone, PartialEq)]
pub enum FusionParams {
    Moe(MoeParams),
    /// Affine head straight on the fused vector.
    Direct(Linear),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder_m1: EncoderParams,
    pub encoder_m2: EncoderParams,
    pub specific_m1: Linear,
    pub specific_m2: Linear,
    pub rca_share: RcaParams,
    pub rca_explore: Option<RcaParams>,
    pub fusion: FusionParams,
}

impl ModelParams {
    /// Uniform fan-in initialisation of every tensor, drawn in path order.
    pub fn init<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c0, c1, c2) = (cfg.token_dim, cfg.c1, cfg.c2);
        let encoder_m1 = EncoderParams::init(rng, c0, c1);
        let encoder_m2 = EncoderParams::init(rng, c0, c1);
        let specific_m1 = Linear::init(rng, c1, c2);
        let specific_m2 = Linear::init(rng, c1, c2);
        let rca_share = RcaParams::init(rng, c1, c2);
        let rca_explore = (cfg.ablation != Ablation::NoExplore).then(|| RcaParams::init(rng, c1, c2));
        let fusion = if cfg.ablation == Ablation::NoMoe {
            FusionParams::Direct(Linear::init(rng, cfg.fused_dim(), cfg.n_bins))
        } else {
            FusionParams::Moe(MoeParams::init(rng, cfg.fused_dim(), c2, cfg.n_experts, cfg.n_bins))
        };
        Ok(Self {
            encoder_m1,
            encoder_m2,
            specific_m1,
            specific_m2,
            rca_share,
            rca_explore,
            fusion,
        })
    }

    pub fn zeros(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (c0, c1, c2) = (cfg.token_dim, cfg.c1, cfg.c2);
        Ok(Self {
            encoder_m1: EncoderParams::zeros(c0, c1),
            encoder_m2: EncoderParams::zeros(c0, c1),
            specific_m1: Linear::zeros(c1, c2),
            specific_m2: Linear::zeros(c1, c2),
            rca_share: RcaParams::zeros(c1, c2),
            rca_explore: (cfg.ablation != Ablation::NoExplore).then(|| RcaParams::zeros(c1, c2)),
            fusion: if cfg.ablation == Ablation::NoMoe {
                FusionParams::Direct(Linear::zeros(cfg.fused_dim(), cfg.n_bins))
            } else {
                FusionParams::Moe(MoeParams::zeros(cfg.fused_dim(), c2, cfg.n_experts, cfg.n_bins))
            },
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder_m1: self.encoder_m1.zeros_like(),
            encoder_m2: self.encoder_m2.zeros_like(),
            specific_m1: self.specific_m1.zeros_like(),
            specific_m2: self.specific_m2.zeros_like(),
            rca_share: self.rca_share.zeros_like(),
            rca_explore: self.rca_explore.as_ref().map(RcaParams::zeros_like),
            fusion: match &self.fusion {
                FusionParams::Moe(m) => FusionParams::Moe(m.zeros_like()),
                FusionParams::Direct(l) => FusionParams::Direct(l.zeros_like()),
            },
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a [f64])) {
        self.encoder_m1.visit("encoder_m1", f);
        self.encoder_m2.visit("encoder_m2", f);
        self.specific_m1.visit("specific_m1", f);
        self.specific_m2.visit("specific_m2", f);
        self.rca_share.visit("rca_share", f);
        if let Some(e) = &self.rca_explore {
            e.visit("rca_explore", f);
        }
        match &self.fusion {
            FusionParams::Moe(m) => m.visit("moe", f),
            FusionParams::Direct(l) => l.visit("direct_head", f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        self.encoder_m1.visit_mut("encoder_m1", f);
        self.encoder_m2.visit_mut("encoder_m2", f);
        self.specific_m1.visit_mut("specific_m1", f);
        self.specific_m2.visit_mut("specific_m2", f);
        self.rca_share.visit_mut("rca_share", f);
        if let Some(e) = &mut self.rca_explore {
            e.visit_mut("rca_explore", f);
        }
        match &mut self.fusion {
            FusionParams::Moe(m) => m.visit_mut("moe", f),
            FusionParams::Direct(l) => l.visit_mut("direct_head", f),
        }
    }

    /// `(path, length)` of every tensor in visiting order.
    pub fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, data| out.push((name, data.len())));
        out
    }

    pub fn paths(&self) -> Vec<String> {
        self.layout().into_iter().map(|(p, _)| p).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|(_, n)| n).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, data| out.extend_from_slice(data));
        out
    }

    pub fn get(&self, path: &str) -> Option<Vec<f64>> {
        let mut found = None;
        self.visit(&mut |name, data| {
            if name == path {
                found = Some(data.to_vec());
            }
        });
        found
    }

    /// Runs `f` on the tensor at `path`; returns false if no such path exists.
    pub fn with_tensor_mut(&mut self, path: &str, mut f: impl FnMut(&mut [f64])) -> bool {
        let mut hit = false;
        self.visit_mut(&mut |name, data| {
            if name == path {
                f(data);
                hit = true;
            }
        });
        hit
    }

    pub fn gate_matrix(&self) -> Option<&Array2<f64>> {
        match &self.fusion {
            FusionParams::Moe(m) => Some(&m.gate),
            FusionParams::Direct(_) => None,
        }
    }
}

/// Closed-form parameter count for a configuration.
///
/// Per modality encoder `C0·C1 + C1 + C1 + 3·C1²`; specific heads
/// `2(C1·C2 + C2)`; each cross-attention instance `2(C1·C2 + C2)`; with
/// `D = F·C2`, dense fusion `D·N + N(D·C2 + C2 + C2² + C2) + N·C2·n_bins + n_bins`
/// or the direct head `D·n_bins + n_bins`.
pub fn expected_param_count(cfg: &TrainConfig) -> usize {
    let (c0, c1, c2, n, bins) = (cfg.token_dim, cfg.c1, cfg.c2, cfg.n_experts, cfg.n_bins);
    let encoder = c0 * c1 + c1 + c1 + 3 * c1 * c1;
    let linear = c1 * c2 + c2;
    let rca_instances = if cfg.ablation == Ablation::NoExplore { 1 } else { 2 };
    let d = cfg.fused_dim();
    let fusion = if cfg.ablation == Ablation::NoMoe {
        d * bins + bins
    } else {
        d * n + n * (d * c2 + c2 + c2 * c2 + c2) + n * c2 * bins + bins
    };
    2 * encoder + 2 * linear + rca_instances * 2 * linear + fusion
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-patient forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub hazards: Array1<f64>,
    pub bundle: DecoupledBundle,
    pub gate_weights: Option<GateWeights>,
    pub segment: usize,
}

/// Mean objective over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub surv: f64,
    pub dis: f64,
    pub total: f64,
    pub clamped: usize,
}

struct BatchCache {
    enc1: EncoderCache,
    enc2: EncoderCache,
    v1: Array2<f64>,
    v2: Array2<f64>,
    sp1: Array2<f64>,
    sp2: Array2<f64>,
    share: Branch,
    explore: Option<Branch>,
    fused: Array2<f64>,
    moe: Option<(Array2<f64>, MoeCache)>,
    hazards: Array2<f64>,
}

/// Embeddings and cross-attention state for one of the share/explore instances.
struct Branch {
    e1: Array2<f64>,
    e2: Array2<f64>,
    cores: Vec<RcaCore>,
    out: Array2<f64>,
}

/// A configured view over parameters that evaluates the pipeline.
pub struct Pipeline<'a> {
    pub params: &'a ModelParams,
    pub cfg: &'a TrainConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if params.encoder_m1.token_dim() != cfg.token_dim
            || params.encoder_m1.feature_dim() != cfg.c1
            || params.specific_m1.output_dim() != cfg.c2
            || params.rca_explore.is_some() != (cfg.ablation != Ablation::NoExplore)
            || matches!(params.fusion, FusionParams::Direct(_)) != (cfg.ablation == Ablation::NoMoe)
        {
            return Err(Error::config("parameters were built for a different configuration"));
        }
        Ok(Self { params, cfg })
    }

    /// Checks that every patient's tokens match the configured width and that a bin exists.
    pub fn check_patients(&self, patients: &[&PatientRecord], need_bins: bool) -> Result<()> {
        for p in patients {
            for (name, t) in [("m1", &p.tokens_m1), ("m2", &p.tokens_m2)] {
                if t.nrows() == 0 {
                    return Err(Error::EmptyInput(format!("patient {} has no {name} tokens", p.id)));
                }
                if t.ncols() != self.cfg.token_dim {
                    return Err(Error::dim(format!(
                        "patient {} has {name} token width {}, model expects {}",
                        p.id,
                        t.ncols(),
                        self.cfg.token_dim
                    )));
                }
            }
            if need_bins {
                match p.bin {
                    Some(b) if b >= 1 && b <= self.cfg.n_bins => {}
                    _ => return Err(Error::Data(format!("patient {} has no valid time bin", p.id))),
                }
            }
        }
        Ok(())
    }

    pub fn choose_segment<R: Rng + ?Sized>(&self, mode: Mode, rng: &mut R) -> Result<usize> {
        match (mode, self.cfg.ablation) {
            (_, Ablation::NoRfr) => Ok(self.cfg.c2),
            (Mode::Train, _) => Ok(sample_segment_length(&self.cfg.segment_set()?, rng)),
            (Mode::Eval, _) => self.cfg.eval_segment_length(),
        }
    }

    pub fn plan(&self, segment: usize) -> Result<ReorgPlan> {
        build_plan(self.cfg.c2, segment, self.cfg.arity())
    }

    fn branch_forward(&self, rca: &RcaParams, v1: &Array2<f64>, v2: &Array2<f64>) -> Branch {
        let e1 = rca.fc1.forward(&v1.view());
        let e2 = rca.fc2.forward(&v2.view());
        let batch = v1.nrows();
        if self.cfg.ablation == Ablation::NoRca {
            let out = (&e1 + &e2) * 0.5;
            return Branch { e1, e2, cores: Vec::new(), out };
        }
        let scale = rca_scale(self.cfg.c2, self.cfg.rca_scaled);
        let mut out = Array2::zeros((batch, self.cfg.c2));
        let mut cores = Vec::with_capacity(batch);
        for b in 0..batch {
            let core = rca_core(
                e1.row(b).as_slice().expect("contiguous"),
                e2.row(b).as_slice().expect("contiguous"),
                scale,
            );
            out.row_mut(b).assign(&ndarray::ArrayView1::from(&core.output));
            cores.push(core);
        }
        Branch { e1, e2, cores, out }
    }

    fn branch_backward(
        &self,
        rca: &RcaParams,
        branch: &Branch,
        v1: &Array2<f64>,
        v2: &Array2<f64>,
        dout: &Array2<f64>,
        grad: &mut RcaParams,
        dv1: &mut Array2<f64>,
        dv2: &mut Array2<f64>,
    ) {
        let (de1, de2) = if self.cfg.ablation == Ablation::NoRca {
            let half = dout * 0.5;
            (half.clone(), half)
        } else {
            let scale = rca_scale(self.cfg.c2, self.cfg.rca_scaled);
            let mut de1 = Array2::zeros(dout.raw_dim());
            let mut de2 = Array2::zeros(dout.raw_dim());
            for (b, core) in branch.cores.iter().enumerate() {
                let (g1, g2) = rca_core_backward(
                    branch.e1.row(b).as_slice().expect("contiguous"),
                    branch.e2.row(b).as_slice().expect("contiguous"),
                    scale,
                    core,
                    dout.row(b).as_slice().expect("contiguous"),
                );
                de1.row_mut(b).assign(&Array1::from(g1));
                de2.row_mut(b).assign(&Array1::from(g2));
            }
            (de1, de2)
        };
        *dv1 += &rca.fc1.backward(&v1.view(), &de1.view(), &mut grad.fc1);
        *dv2 += &rca.fc2.backward(&v2.view(), &de2.view(), &mut grad.fc2);
    }

    fn forward_batch(&self, patients: &[&PatientRecord], plan: &ReorgPlan) -> Result<BatchCache> {
        let p = self.params;
        let t1: Vec<ArrayView2<f64>> = patients.iter().map(|r| r.tokens_m1.view()).collect();
        let t2: Vec<ArrayView2<f64>> = patients.iter().map(|r| r.tokens_m2.view()).collect();
        let (v1, enc1) = p.encoder_m1.forward_batch(&t1)?;
        let (v2, enc2) = p.encoder_m2.forward_batch(&t2)?;

        let mut sp1 = p.specific_m1.forward(&v1.view());
        relu_inplace(&mut sp1);
        let mut sp2 = p.specific_m2.forward(&v2.view());
        relu_inplace(&mut sp2);
        let share = self.branch_forward(&p.rca_share, &v1, &v2);
        let explore = p.rca_explore.as_ref().map(|rca| self.branch_forward(rca, &v1, &v2));

        let batch = patients.len();
        let c2 = self.cfg.c2;
        let mut concat = Array2::zeros((batch, self.cfg.fused_dim()));
        concat.slice_mut(s![.., 0..c2]).assign(&sp1);
        concat.slice_mut(s![.., c2..2 * c2]).assign(&sp2);
        concat.slice_mut(s![.., 2 * c2..3 * c2]).assign(&share.out);
        if let Some(e) = &explore {
            concat.slice_mut(s![.., 3 * c2..4 * c2]).assign(&e.out);
        }
        let mut fused = Array2::zeros(concat.raw_dim());
        for (src, mut dst) in concat.rows().into_iter().zip(fused.rows_mut()) {
            plan.apply_into(
                src.as_slice().expect("contiguous"),
                dst.as_slice_mut().expect("contiguous"),
            );
        }

        let (logits, moe) = match &p.fusion {
            FusionParams::Moe(m) => {
                let (vexp, cache) = m.forward_batch(&fused.view());
                (m.head.forward(&vexp.view()), Some((vexp, cache)))
            }
            FusionParams::Direct(head) => (head.forward(&fused.view()), None),
        };
        let hazards = logits.mapv(sigmoid);
        Ok(BatchCache {
            enc1,
            enc2,
            v1,
            v2,
            sp1,
            sp2,
            share,
            explore,
            fused,
            moe,
            hazards,
        })
    }

    fn bundle_at(cache: &BatchCache, b: usize) -> DecoupledBundle {
        DecoupledBundle {
            sp1: cache.sp1.row(b).to_owned(),
            sp2: cache.sp2.row(b).to_owned(),
            share: cache.share.out.row(b).to_owned(),
            explore: cache.explore.as_ref().map(|e| e.out.row(b).to_owned()),
        }
    }

    /// Forward pass for a set of patients with a fixed segment length.
    pub fn forward_many(&self, patients: &[&PatientRecord], segment: usize) -> Result<Vec<ForwardOutput>> {
        self.check_patients(patients, false)?;
        let plan = self.plan(segment)?;
        let cache = self.forward_batch(patients, &plan)?;
        Ok((0..patients.len())
            .map(|b| ForwardOutput {
                hazards: cache.hazards.row(b).to_owned(),
                bundle: Self::bundle_at(&cache, b),
                gate_weights: cache
                    .moe
                    .as_ref()
                    .map(|(_, m)| GateWeights(m.gates.row(b).to_vec())),
                segment,
            })
            .collect())
    }

    /// Mean loss over the batch and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, patients: &[&PatientRecord], segment: usize) -> Result<(LossBreakdown, ModelParams)> {
        let (loss, grad) = self.loss_impl(patients, segment, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    pub fn loss(&self, patients: &[&PatientRecord], segment: usize) -> Result<LossBreakdown> {
        self.loss_impl(patients, segment, false).map(|(l, _)| l)
    }

    fn loss_impl(
        &self,
        patients: &[&PatientRecord],
        segment: usize,
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<ModelParams>)> {
        if patients.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        self.check_patients(patients, true)?;
        let plan = self.plan(segment)?;
        let cache = self.forward_batch(patients, &plan)?;
        let batch = patients.len();
        let inv = 1.0 / batch as f64;
        let alpha = self.cfg.alpha;
        let opts = DecouplingLossOptions {
            metric: self.cfg.metric,
            specific_gap_cap: self.cfg.specific_gap_cap,
        };

        let mut breakdown = LossBreakdown::default();
        let mut dlogits = Array2::zeros(cache.hazards.raw_dim());
        let mut dbundles = Vec::with_capacity(batch);
        for (b, patient) in patients.iter().enumerate() {
            let h = cache.hazards.row(b);
            let label = SurvivalLabel {
                bin: patient.bin.expect("checked"),
                censored: !patient.event,
            };
            let nll = nll_with_grad(h.as_slice().expect("contiguous"), label)?;
            breakdown.surv += nll.loss * inv;
            breakdown.clamped += nll.clamped;
            for (j, g) in nll.grad.iter().enumerate() {
                dlogits[[b, j]] = g * h[j] * (1.0 - h[j]) * inv;
            }
            let (dis, dbundle) = decoupling_loss_with_grad(&Self::bundle_at(&cache, b), opts)?;
            breakdown.dis += dis * inv;
            dbundles.push(dbundle);
        }
        breakdown.total = breakdown.surv + alpha * breakdown.dis;
        if !breakdown.surv.is_finite() {
            return Err(Error::Numeric(format!("survival loss is not finite ({})", breakdown.surv)));
        }
        if !breakdown.dis.is_finite() {
            return Err(Error::Numeric(format!("decoupling loss is not finite ({})", breakdown.dis)));
        }
        if !want_grad {
            return Ok((breakdown, None));
        }

        let p = self.params;
        let mut grad = p.zeros_like();
        let dfused = match (&p.fusion, &mut grad.fusion, &cache.moe) {
            (FusionParams::Moe(m), FusionParams::Moe(gm), Some((vexp, moe_cache))) => {
                let dvexp = m.head.backward(&vexp.view(), &dlogits.view(), &mut gm.head);
                m.backward_batch(&cache.fused.view(), moe_cache, &dvexp.view(), gm)
            }
            (FusionParams::Direct(head), FusionParams::Direct(gh), None) => {
                head.backward(&cache.fused.view(), &dlogits.view(), gh)
            }
            _ => unreachable!("fusion cache matches fusion parameters"),
        };

        let c2 = self.cfg.c2;
        let mut dconcat = Array2::zeros(dfused.raw_dim());
        for (src, mut dst) in dfused.rows().into_iter().zip(dconcat.rows_mut()) {
            plan.invert_into(
                src.as_slice().expect("contiguous"),
                dst.as_slice_mut().expect("contiguous"),
            );
        }
        let scale_dis = alpha * inv;
        for (b, db) in dbundles.iter().enumerate() {
            let mut row = dconcat.row_mut(b);
            row.slice_mut(s![0..c2]).scaled_add(scale_dis, &db.sp1);
            row.slice_mut(s![c2..2 * c2]).scaled_add(scale_dis, &db.sp2);
            row.slice_mut(s![2 * c2..3 * c2]).scaled_add(scale_dis, &db.share);
            if let Some(e) = &db.explore {
                row.slice_mut(s![3 * c2..4 * c2]).scaled_add(scale_dis, e);
            }
        }

        let mut dv1 = Array2::zeros(cache.v1.raw_dim());
        let mut dv2 = Array2::zeros(cache.v2.raw_dim());

        let mut dsp1 = dconcat.slice(s![.., 0..c2]).to_owned();
        relu_backward(&cache.sp1, &mut dsp1);
        dv1 += &p.specific_m1.backward(&cache.v1.view(), &dsp1.view(), &mut grad.specific_m1);
        let mut dsp2 = dconcat.slice(s![.., c2..2 * c2]).to_owned();
        relu_backward(&cache.sp2, &mut dsp2);
        dv2 += &p.specific_m2.backward(&cache.v2.view(), &dsp2.view(), &mut grad.specific_m2);

        let dshare = dconcat.slice(s![.., 2 * c2..3 * c2]).to_owned();
        self.branch_backward(
            &p.rca_share,
            &cache.share,
            &cache.v1,
            &cache.v2,
            &dshare,
            &mut grad.rca_share,
            &mut dv1,
            &mut dv2,
        );
        if let (Some(rca), Some(branch), Some(g)) = (&p.rca_explore, &cache.explore, &mut grad.rca_explore) {
            let dexplore = dconcat.slice(s![.., 3 * c2..4 * c2]).to_owned();
            self.branch_backward(rca, branch, &cache.v1, &cache.v2, &dexplore, g, &mut dv1, &mut dv2);
        }

        let t1: Vec<ArrayView2<f64>> = patients.iter().map(|r| r.tokens_m1.view()).collect();
        let t2: Vec<ArrayView2<f64>> = patients.iter().map(|r| r.tokens_m2.view()).collect();
        p.encoder_m1.backward_batch(&t1, &cache.enc1, &dv1.view(), &mut grad.encoder_m1);
        p.encoder_m2.backward_batch(&t2, &cache.enc2, &dv2.view(), &mut grad.encoder_m2);
        Ok((breakdown, Some(grad)))
    }

    /// Gradient of `Σ_b ⟨w_b, fused_b⟩` pulled back through the reorganization only.
    pub fn reorganize_backward(&self, dfused: &ArrayView2<f64>, segment: usize) -> Result<Array2<f64>> {
        let plan = self.plan(segment)?;
        let mut out = Array2::zeros(dfused.raw_dim());
        for (src, mut dst) in dfused.axis_iter(Axis(0)).zip(out.rows_mut()) {
            plan.invert_into(&src.to_vec(), dst.as_slice_mut().expect("contiguous"));
        }
        Ok(out)
    }
}

/// Single-patient forward; training mode draws the segment length from `rng`.
pub fn forward<R: Rng + ?Sized>(
    patient: &PatientRecord,
    params: &ModelParams,
    cfg: &TrainConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let pipe = Pipeline::new(params, cfg)?;
    let segment = pipe.choose_segment(mode, rng)?;
    Ok(pipe.forward_many(&[patient], segment)?.remove(0))
}
