//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use survfuse::datasets::{assign_time_bins, generate_synthetic_cohort};
use survfuse::{Cohort, ModelParams, RiskRecord, SynthConfig, TrainConfig};

/// Binned synthetic cohort of `n` patients.
pub fn cohort(n: usize) -> Cohort {
    let synth = SynthConfig {
        n_patients: n,
        ..SynthConfig::default()
    };
    assign_time_bins(&generate_synthetic_cohort(&synth).expect("valid synth config"), 4).expect("enough events")
}

pub fn model(cfg: &TrainConfig) -> ModelParams {
    ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).expect("valid config")
}

/// Random risks with integer-valued times so ties occur.
pub fn risk_records(n: usize, seed: u64) -> Vec<RiskRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| RiskRecord {
            risk: rng.random(),
            time: rng.random_range(1..50) as f64,
            event: rng.random_bool(0.7),
        })
        .collect()
}

pub fn vector(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}
