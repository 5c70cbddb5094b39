//! Flat run settings shared by the config file and command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use survfuse::{Ablation, DistanceMetric, SynthConfig, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthOpts {
    /// Number of patients.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k_shared: Option<usize>,
    #[arg(long)]
    pub k_spec: Option<usize>,
    /// Tokens per patient in modality 1.
    #[arg(long)]
    pub tokens_m1: Option<usize>,
    #[arg(long)]
    pub tokens_m2: Option<usize>,
    /// Token feature width.
    #[arg(long)]
    pub token_dim: Option<usize>,
    #[arg(long)]
    pub w_shared: Option<f64>,
    #[arg(long)]
    pub w_spec1: Option<f64>,
    #[arg(long)]
    pub w_spec2: Option<f64>,
    #[arg(long)]
    pub w_interact: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Upper end of the censoring window; `inf` disables censoring.
    #[arg(long)]
    pub censor_horizon: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelOpts {
    #[arg(long)]
    pub n_bins: Option<usize>,
    #[arg(long)]
    pub c1: Option<usize>,
    #[arg(long)]
    pub c2: Option<usize>,
    #[arg(long)]
    pub n_experts: Option<usize>,
    /// Segment lengths for feature reorganization, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub segments: Option<Vec<usize>>,
    #[arg(long)]
    pub eval_segment: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Distance for the decoupling loss: mse, l1, kl or cos.
    #[arg(long)]
    pub metric: Option<String>,
    /// Ablation variant: full, no-explore, no-rca, no-rfr or no-moe.
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long)]
    pub rca_scaled: Option<bool>,
    #[arg(long)]
    pub specific_gap_cap: Option<f64>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub k: Option<usize>,
}

/// Everything a run can be configured with; keys mirror the long flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub synth: SynthOpts,
    #[serde(flatten)]
    pub model: ModelOpts,
    pub cohort: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub risks: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub points: Option<PathBuf>,
}

/// Every key a config file may use.
fn known_keys() -> Vec<String> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(map)) => map.keys().cloned().collect(),
        _ => unreachable!("run config serializes to an object"),
    }
}

fn to_table(cfg: &RunConfig) -> toml::Table {
    toml::Table::try_from(cfg).expect("run config serializes to a table")
}

/// Reads a key-value TOML file; keys use underscores in place of the flags' dashes.
pub fn read_config_file(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    let known = known_keys();
    if let Some(key) = table.keys().find(|k| !known.contains(k)) {
        return Err(CliError::usage(format!("config {}: unknown key `{key}`", path.display())));
    }
    table
        .try_into()
        .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

/// Values set in `flags` win over those in `file`.
pub fn overlay(file: &RunConfig, flags: &RunConfig) -> RunConfig {
    let mut merged = to_table(file);
    merged.extend(to_table(flags));
    merged.try_into().expect("merged config has the run config shape")
}

/// A path that must be given; input paths must also exist.
pub fn required(value: &Option<PathBuf>, flag: &str, input: bool) -> Result<PathBuf, CliError> {
    let path = value
        .clone()
        .ok_or_else(|| CliError::usage(format!("missing required --{flag}")))?;
    if input && !path.is_file() {
        return Err(CliError::usage(format!("--{flag}: {} does not exist", path.display())));
    }
    Ok(path)
}

impl RunConfig {
    pub fn synth_config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        let s = &self.synth;
        SynthConfig {
            n_patients: s.n.unwrap_or(d.n_patients),
            k_shared: s.k_shared.unwrap_or(d.k_shared),
            k_spec: s.k_spec.unwrap_or(d.k_spec),
            tokens_m1: s.tokens_m1.unwrap_or(d.tokens_m1),
            tokens_m2: s.tokens_m2.unwrap_or(d.tokens_m2),
            token_dim: s.token_dim.unwrap_or(d.token_dim),
            w_shared: s.w_shared.unwrap_or(d.w_shared),
            w_spec1: s.w_spec1.unwrap_or(d.w_spec1),
            w_spec2: s.w_spec2.unwrap_or(d.w_spec2),
            w_interact: s.w_interact.unwrap_or(d.w_interact),
            noise_sigma: s.noise_sigma.unwrap_or(d.noise_sigma),
            censor_horizon: s.censor_horizon.unwrap_or(d.censor_horizon),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.model.n_bins.unwrap_or(TrainConfig::default().n_bins)
    }

    pub fn folds(&self) -> usize {
        self.model.k.unwrap_or(5)
    }

    pub fn ablation(&self) -> Result<Ablation, CliError> {
        match &self.model.ablate {
            Some(s) => Ok(s.parse()?),
            None => Ok(Ablation::Full),
        }
    }

    /// Training configuration; `token_dim` comes from the cohort being used.
    pub fn train_config(&self, token_dim: usize) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let m = &self.model;
        let metric: DistanceMetric = match &m.metric {
            Some(s) => s.parse()?,
            None => d.metric,
        };
        let cfg = TrainConfig {
            token_dim,
            c1: m.c1.unwrap_or(d.c1),
            c2: m.c2.unwrap_or(d.c2),
            n_bins: self.n_bins(),
            n_experts: m.n_experts.unwrap_or(d.n_experts),
            segments: m.segments.clone().unwrap_or(d.segments),
            eval_segment: m.eval_segment.or(d.eval_segment),
            alpha: m.alpha.unwrap_or(d.alpha),
            learning_rate: m.lr.unwrap_or(d.learning_rate),
            weight_decay: m.weight_decay.unwrap_or(d.weight_decay),
            epochs: m.epochs.unwrap_or(d.epochs),
            batch_size: m.batch_size.unwrap_or(d.batch_size),
            seed: self.seed.unwrap_or(d.seed),
            metric,
            ablation: self.ablation()?,
            rca_scaled: m.rca_scaled.unwrap_or(d.rca_scaled),
            specific_gap_cap: m.specific_gap_cap.or(d.specific_gap_cap),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
