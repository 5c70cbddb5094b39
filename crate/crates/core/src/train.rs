//! Optimisation, cross-validation, ablations, gradient checking and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{Ablation, TrainConfig};
use crate::datasets::{assign_time_bins, generate_synthetic_cohort, Cohort, PatientRecord, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{concordance_index, logrank_test, stratify_by_median, MetricRow, RiskRecord};
use crate::model::{LossBreakdown, Mode, ModelParams, Pipeline};
use crate::survival::risk_score;

pub const CHECKPOINT_VERSION: u64 = 1;
const CHECKPOINT_FORMAT: &str = "survfuse-checkpoint";

/// Patients per forward call at evaluation time.
const EVAL_CHUNK: usize = 64;

/// Adam with decoupled weight decay, over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        let g = grad.to_flat();
        assert_eq!(g.len(), self.m.len(), "gradient layout does not match optimiser state");
        self.t += 1;
        let step = self.learning_rate / (1.0 - self.beta1.powi(self.t));
        let inv_root_bc2 = 1.0 / (1.0 - self.beta2.powi(self.t)).sqrt();
        let decay = self.learning_rate * self.weight_decay;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        params.visit_mut(&mut |_, data| {
            let end = offset + data.len();
            for (((p, m), v), &g) in data
                .iter_mut()
                .zip(&mut m[offset..end])
                .zip(&mut v[offset..end])
                .zip(&g[offset..end])
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() * inv_root_bc2 + eps) + decay * *p;
            }
            offset = end;
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub surv: f64,
    pub dis: f64,
    pub total: f64,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Validation C-index per fold; `None` for flagged folds.
    pub fold_c_index: Vec<Option<f64>>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_surv,l_dis,total,clamped\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.surv, e.dis, e.total, e.clamped);
        }
        out
    }
}

fn check_trainable(cohort: &Cohort, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(Error::EmptyInput("cohort has no patients".into()));
    }
    if !cohort.is_binned() {
        return Err(Error::Data("cohort must be binned before training".into()));
    }
    if cohort.n_bins != Some(cfg.n_bins) {
        return Err(Error::config(format!(
            "cohort has {:?} bins, configuration expects {}",
            cohort.n_bins, cfg.n_bins
        )));
    }
    if cohort.token_dim() != Some(cfg.token_dim) {
        return Err(Error::config(format!(
            "cohort token width {:?} does not match token_dim = {}",
            cohort.token_dim(),
            cfg.token_dim
        )));
    }
    Ok(())
}

/// Trains from a fresh initialisation seeded by `cfg.seed`.
pub fn train_model(cohort: &Cohort, cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    check_trainable(cohort, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(cfg, &mut rng)?;
    let history = train_from(&mut params, cohort, cfg, &mut rng)?;
    Ok((params, history))
}

/// Continues training `params` in place for `cfg.epochs` epochs.
pub fn train_from(
    params: &mut ModelParams,
    cohort: &Cohort,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainHistory> {
    train_with_callback(params, cohort, cfg, rng, &mut |_, _| {})
}

/// [`train_from`] with a hook called after every epoch.
pub fn train_with_callback(
    params: &mut ModelParams,
    cohort: &Cohort,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    on_epoch: &mut dyn FnMut(&EpochRecord, &ModelParams),
) -> Result<TrainHistory> {
    check_trainable(cohort, cfg)?;
    Pipeline::new(params, cfg)?.check_patients(&cohort.patients.iter().collect::<Vec<_>>(), true)?;
    let mut adam = Adam::new(params.num_params(), cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PatientRecord> = chunk.iter().map(|&i| &cohort.patients[i]).collect();
            let (loss, grad) = {
                let pipe = Pipeline::new(params, cfg)?;
                let segment = pipe.choose_segment(Mode::Train, rng)?;
                pipe.loss_and_grad(&batch, segment)?
            };
            let w = batch.len() as f64;
            sum.surv += loss.surv * w;
            sum.dis += loss.dis * w;
            sum.total += loss.total * w;
            sum.clamped += loss.clamped;
            adam.step(params, &grad);
        }
        let n = cohort.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            surv: sum.surv / n,
            dis: sum.dis / n,
            total: sum.total / n,
            clamped: sum.clamped,
        };
        log::debug!(
            "epoch {}: L_surv {:.5} L_dis {:.5} total {:.5}",
            record.epoch,
            record.surv,
            record.dis,
            record.total
        );
        on_epoch(&record, params);
        history.epochs.push(record);
    }
    Ok(history)
}

/// Evaluation-mode hazards for every patient.
pub fn predict_hazards_cohort(params: &ModelParams, cfg: &TrainConfig, cohort: &Cohort) -> Result<Vec<Vec<f64>>> {
    let pipe = Pipeline::new(params, cfg)?;
    let segment = cfg.eval_segment_length()?;
    let mut out = Vec::with_capacity(cohort.len());
    for chunk in cohort.patients.chunks(EVAL_CHUNK) {
        let refs: Vec<&PatientRecord> = chunk.iter().collect();
        for f in pipe.forward_many(&refs, segment)? {
            out.push(f.hazards.to_vec());
        }
    }
    Ok(out)
}

pub fn predict_risks(params: &ModelParams, cfg: &TrainConfig, cohort: &Cohort) -> Result<Vec<RiskRecord>> {
    Ok(predict_hazards_cohort(params, cfg, cohort)?
        .iter()
        .zip(&cohort.patients)
        .map(|(h, p)| RiskRecord {
            risk: risk_score(h),
            time: p.time,
            event: p.event,
        })
        .collect())
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded fold index per patient, stratified by event flag.
pub fn fold_assignment(cohort: &Cohort, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {k}")));
    }
    if cohort.len() < k {
        return Err(Error::Argument(format!("{} patients cannot fill {k} folds", cohort.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xF01D));
    let mut events: Vec<usize> = (0..cohort.len()).filter(|&i| cohort.patients[i].event).collect();
    let mut censored: Vec<usize> = (0..cohort.len()).filter(|&i| !cohort.patients[i].event).collect();
    events.shuffle(&mut rng);
    censored.shuffle(&mut rng);
    let mut folds = vec![0; cohort.len()];
    for (pos, &i) in events.iter().chain(censored.iter()).enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub c_index: Option<f64>,
    pub chi2: Option<f64>,
    pub p: Option<f64>,
    /// Reason the fold was excluded from the mean.
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub variant: Ablation,
    pub seed: u64,
    pub folds: Vec<FoldMetrics>,
    /// Mean and population standard deviation over unflagged folds.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Out-of-fold predictions in cohort order.
    pub out_of_fold: Vec<RiskRecord>,
    pub histories: Vec<TrainHistory>,
}

impl CvReport {
    pub fn rows(&self) -> Vec<MetricRow> {
        self.folds
            .iter()
            .map(|f| MetricRow {
                fold: f.fold.to_string(),
                c_index: f.c_index,
                chi2: f.chi2,
                p: f.p,
                variant: self.variant.to_string(),
                seed: self.seed,
            })
            .collect()
    }

    /// One aggregate row: mean C-index and the median-split test on pooled out-of-fold risks.
    pub fn summary_row(&self) -> MetricRow {
        let test = stratify_by_median(&self.out_of_fold)
            .and_then(|(high, low)| logrank_test(&high, &low))
            .ok();
        MetricRow {
            fold: "mean".into(),
            c_index: self.mean,
            chi2: test.map(|t| t.chi2),
            p: test.map(|t| t.p),
            variant: self.variant.to_string(),
            seed: self.seed,
        }
    }

    /// `"<label>: C-index mean±std"` in the tables' reporting style.
    pub fn summary(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{}: C-index {:.4}±{:.4}", self.variant.label(), m, s),
            _ => format!("{}: C-index undefined (all folds flagged)", self.variant.label()),
        }
    }
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// `k`-fold cross-validation; bin edges are refit on each training split.
pub fn cross_validate(cohort: &Cohort, k: usize, cfg: &TrainConfig) -> Result<CvReport> {
    cfg.validate()?;
    if cohort.token_dim() != Some(cfg.token_dim) {
        return Err(Error::config(format!(
            "cohort token width {:?} does not match token_dim = {}",
            cohort.token_dim(),
            cfg.token_dim
        )));
    }
    let folds = fold_assignment(cohort, k, cfg.seed)?;
    let mut out_of_fold = vec![None; cohort.len()];
    let mut metrics = Vec::with_capacity(k);
    let mut histories = Vec::with_capacity(k);
    for fold in 0..k {
        let train_idx: Vec<usize> = (0..cohort.len()).filter(|&i| folds[i] != fold).collect();
        let val_idx: Vec<usize> = (0..cohort.len()).filter(|&i| folds[i] == fold).collect();
        let train = assign_time_bins(&cohort.subset(&train_idx), cfg.n_bins)?;
        let val = cohort.subset(&val_idx);
        let fold_cfg = TrainConfig {
            seed: mix_seed(cfg.seed, fold as u64 + 1),
            ..cfg.clone()
        };
        let (params, history) = train_model(&train, &fold_cfg)?;
        let risks = predict_risks(&params, cfg, &val)?;
        for (&i, r) in val_idx.iter().zip(&risks) {
            out_of_fold[i] = Some(*r);
        }
        let (c_index, flag) = match concordance_index(&risks) {
            Ok(c) => (Some(c), None),
            Err(e) => {
                log::warn!("fold {fold} excluded from the mean: {e}");
                (None, Some(e.to_string()))
            }
        };
        let test = stratify_by_median(&risks).and_then(|(high, low)| logrank_test(&high, &low)).ok();
        log::info!("fold {fold}: C-index {:?}", c_index);
        metrics.push(FoldMetrics {
            fold,
            n_train: train_idx.len(),
            n_val: val_idx.len(),
            c_index,
            chi2: test.map(|t| t.chi2),
            p: test.map(|t| t.p),
            flag,
        });
        histories.push(history);
    }
    let valid: Vec<f64> = metrics.iter().filter_map(|f| f.c_index).collect();
    let stats = mean_std(&valid);
    for h in &mut histories {
        h.fold_c_index = metrics.iter().map(|f| f.c_index).collect();
    }
    Ok(CvReport {
        variant: cfg.ablation,
        seed: cfg.seed,
        folds: metrics,
        mean: stats.map(|s| s.0),
        std: stats.map(|s| s.1),
        out_of_fold: out_of_fold.into_iter().map(|r| r.expect("every patient validated once")).collect(),
        histories,
    })
}

/// Cross-validates one ablation variant with otherwise identical settings.
pub fn run_ablation(cohort: &Cohort, variant: Ablation, k: usize, cfg: &TrainConfig) -> Result<CvReport> {
    let cfg = TrainConfig {
        ablation: variant,
        ..cfg.clone()
    };
    cross_validate(cohort, k, &cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathError {
    pub path: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub segment: usize,
    pub rows: Vec<PathError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst_path(&self) -> Option<&PathError> {
        self.rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
/// Denominator floor for the relative error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADCHECK_FLOOR)
}

/// Per-path worst error between two gradients with the same layout.
pub fn compare_gradients(analytic: &ModelParams, numeric: &ModelParams) -> Result<Vec<PathError>> {
    let mut reference = BTreeMap::new();
    numeric.visit(&mut |path, data| {
        reference.insert(path, data);
    });
    let mut rows = Vec::new();
    let mut missing = None;
    analytic.visit(&mut |path, data| match reference.get(&path) {
        Some(other) if other.len() == data.len() => {
            let mut row = PathError {
                path,
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                len: data.len(),
            };
            for (a, n) in data.iter().zip(other.iter()) {
                row.max_rel_error = row.max_rel_error.max(relative_error(*a, *n));
                row.max_abs_error = row.max_abs_error.max((a - n).abs());
            }
            rows.push(row);
        }
        _ => missing = Some(path),
    });
    match missing {
        Some(path) => Err(Error::dim(format!("gradient layouts differ at `{path}`"))),
        None => Ok(rows),
    }
}

/// Central differences of the mean batch loss for every parameter.
pub fn numeric_gradient(
    params: &ModelParams,
    cfg: &TrainConfig,
    batch: &[&PatientRecord],
    segment: usize,
    step: f64,
) -> Result<ModelParams> {
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    let layout = params.layout();
    for (path, len) in &layout {
        let mut column = vec![0.0; *len];
        for (k, slot) in column.iter_mut().enumerate() {
            let original = params.get(path).expect("path from layout")[k];
            probe.with_tensor_mut(path, |d| d[k] = original + step);
            let up = Pipeline::new(&probe, cfg)?.loss(batch, segment)?.total;
            probe.with_tensor_mut(path, |d| d[k] = original - step);
            let down = Pipeline::new(&probe, cfg)?.loss(batch, segment)?.total;
            probe.with_tensor_mut(path, |d| d[k] = original);
            *slot = (up - down) / (2.0 * step);
        }
        grad.with_tensor_mut(path, |d| d.copy_from_slice(&column));
    }
    Ok(grad)
}

/// Small binned cohort used by gradient checks.
pub fn gradcheck_cohort(cfg: &TrainConfig, seed: u64) -> Result<Cohort> {
    let synth = SynthConfig {
        n_patients: 6,
        tokens_m1: 3,
        tokens_m2: 4,
        token_dim: cfg.token_dim,
        seed,
        ..SynthConfig::default()
    };
    let cohort = generate_synthetic_cohort(&synth)?;
    // Spread bins and censoring so every likelihood branch is exercised.
    let mut binned = cohort;
    binned.n_bins = Some(cfg.n_bins);
    for (i, p) in binned.patients.iter_mut().enumerate() {
        p.bin = Some(1 + i % cfg.n_bins);
        p.event = i % 3 != 2;
    }
    Ok(binned)
}

/// Analytic versus central-difference gradients at a fixed segment length.
pub fn gradient_check(cfg_small: &TrainConfig, seed: u64, segment: usize) -> Result<GradCheckReport> {
    let cohort = gradcheck_cohort(cfg_small, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6C4E));
    let params = ModelParams::init(cfg_small, &mut rng)?;
    let batch: Vec<&PatientRecord> = cohort.patients.iter().collect();
    let (_, analytic) = Pipeline::new(&params, cfg_small)?.loss_and_grad(&batch, segment)?;
    let numeric = numeric_gradient(&params, cfg_small, &batch, segment, GRADCHECK_STEP)?;
    Ok(GradCheckReport {
        seed,
        segment,
        rows: compare_gradients(&analytic, &numeric)?,
    })
}

pub fn checkpoint_json(params: &ModelParams, cfg: &TrainConfig) -> Result<Value> {
    let mut tensors = serde_json::Map::new();
    params.visit(&mut |path, data| {
        tensors.insert(path, json!(data));
    });
    Ok(json!({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": serde_json::to_value(cfg).map_err(|e| Error::config(e.to_string()))?,
        "tensors": tensors,
    }))
}

pub fn save_checkpoint(params: &ModelParams, cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string(&checkpoint_json(params, cfg)?).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        field: field.into(),
        message: message.into(),
    }
}

pub fn parse_checkpoint(text: &str) -> Result<(ModelParams, TrainConfig)> {
    let root: Value = serde_json::from_str(text).map_err(|e| schema("<root>", e.to_string()))?;
    if root.get("format").and_then(Value::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(schema("format", format!("expected \"{CHECKPOINT_FORMAT}\"")));
    }
    match root.get("version").and_then(Value::as_u64) {
        Some(CHECKPOINT_VERSION) => {}
        other => return Err(schema("version", format!("unsupported version {other:?}"))),
    }
    let cfg: TrainConfig = serde_json::from_value(root.get("config").cloned().ok_or_else(|| schema("config", "missing"))?)
        .map_err(|e| schema("config", e.to_string()))?;
    cfg.validate()?;
    let tensors = root
        .get("tensors")
        .and_then(Value::as_object)
        .ok_or_else(|| schema("tensors", "missing or not an object"))?;
    let mut params = ModelParams::zeros(&cfg)?;
    let layout = params.layout();
    if tensors.len() != layout.len() {
        let known: Vec<&String> = layout.iter().map(|(p, _)| p).collect();
        if let Some(extra) = tensors.keys().find(|k| !known.contains(k)) {
            return Err(schema(format!("tensors.{extra}"), "unknown parameter path"));
        }
    }
    for (path, len) in layout {
        let field = format!("tensors.{path}");
        let values = tensors
            .get(&path)
            .and_then(Value::as_array)
            .ok_or_else(|| schema(&field, "missing"))?;
        if values.len() != len {
            return Err(schema(&field, format!("expected {len} values, found {}", values.len())));
        }
        let data: Vec<f64> = values
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| schema(&field, "non-numeric value")))
            .collect::<Result<_>>()?;
        params.with_tensor_mut(&path, |d| d.copy_from_slice(&data));
    }
    Ok((params, cfg))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, TrainConfig)> {
    parse_checkpoint(&std::fs::read_to_string(path)?)
}
