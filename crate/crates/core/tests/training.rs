use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use survfuse::datasets::generate_synthetic_cohort;
use survfuse::train::{
    checkpoint_json, compare_gradients, cross_validate, load_checkpoint, numeric_gradient, parse_checkpoint,
    predict_risks, save_checkpoint, train_from, train_model, train_with_callback,
};
use survfuse::{Ablation, Cohort, Error, ModelParams, PatientRecord, Pipeline, SynthConfig, TrainConfig};

fn tiny() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::small()
    }
}

fn cohort(n: usize, seed: u64) -> Cohort {
    let raw = generate_synthetic_cohort(&SynthConfig {
        n_patients: n,
        tokens_m1: 3,
        tokens_m2: 4,
        token_dim: 4,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    with_bins(raw)
}

/// Bins assigned round-robin so tiny cohorts exercise every bin.
fn with_bins(mut c: Cohort) -> Cohort {
    c.n_bins = Some(4);
    for (i, p) in c.patients.iter_mut().enumerate() {
        p.bin = Some(1 + i % 4);
    }
    c
}

fn init(cfg: &TrainConfig, seed: u64) -> ModelParams {
    ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn single_patient_survival_loss_drops_by_half() {
    let cfg = TrainConfig {
        alpha: 0.0,
        learning_rate: 1e-3,
        epochs: 200,
        batch_size: 1,
        ..TrainConfig::small()
    };
    let mut data = cohort(1, 2);
    data.patients[0].event = true;
    let (_, history) = train_model(&data, &cfg).unwrap();
    let first = history.epochs[0].surv;
    let last = history.epochs.last().unwrap().surv;
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn same_seed_gives_identical_history_and_params() {
    let data = cohort(12, 3);
    let cfg = tiny();
    let a = train_model(&data, &cfg).unwrap();
    let b = train_model(&data, &cfg).unwrap();
    assert_eq!(a.1.to_csv(), b.1.to_csv());
    assert_eq!(a.0.to_flat(), b.0.to_flat());
    let c = train_model(&data, &TrainConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.0.to_flat(), c.0.to_flat());
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let data = cohort(8, 4);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        weight_decay: 1e-2,
        segments: vec![4],
        batch_size: 8,
        epochs: 4,
        ..TrainConfig::small()
    };
    let mut params = init(&cfg, 1);
    let before = params.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let history = train_from(&mut params, &data, &cfg, &mut rng).unwrap();
    assert_eq!(params.to_flat(), before);
    let totals: Vec<f64> = history.epochs.iter().map(|e| e.total).collect();
    // shuffling changes summation order only
    assert!(totals.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12), "{totals:?}");
}

#[test]
fn callback_sees_every_epoch() {
    let data = cohort(8, 5);
    let cfg = tiny();
    let mut epochs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    train_with_callback(&mut init(&cfg, 0), &data, &cfg, &mut rng, &mut |rec, params| {
        assert_eq!(params.num_params(), survfuse::model::expected_param_count(&cfg));
        epochs.push(rec.epoch);
    })
    .unwrap();
    assert_eq!(epochs.len(), cfg.epochs);
}

#[test]
fn training_rejects_unbinned_or_mismatched_cohorts() {
    let cfg = tiny();
    let raw = generate_synthetic_cohort(&SynthConfig {
        n_patients: 4,
        token_dim: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    assert!(train_model(&raw, &cfg).is_err());
    let wide = with_bins(
        generate_synthetic_cohort(&SynthConfig {
            n_patients: 4,
            token_dim: 6,
            ..SynthConfig::default()
        })
        .unwrap(),
    );
    assert!(matches!(train_model(&wide, &cfg), Err(Error::Config(_))));
}

#[test]
fn nan_parameter_names_the_survival_term() {
    let data = cohort(4, 6);
    let cfg = tiny();
    let mut params = init(&cfg, 0);
    assert!(params.with_tensor_mut("moe.head.bias", |b| b[0] = f64::NAN));
    let refs: Vec<&PatientRecord> = data.patients.iter().collect();
    let err = Pipeline::new(&params, &cfg).unwrap().loss(&refs, 2).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert!(err.to_string().contains("survival loss"), "{err}");
}

#[test]
fn saturated_hazards_give_zero_gradients() {
    let data = cohort(4, 7);
    let cfg = TrainConfig {
        alpha: 0.0,
        ..tiny()
    };
    let mut params = init(&cfg, 0);
    params.with_tensor_mut("moe.head.bias", |b| b.fill(100.0));
    let refs: Vec<&PatientRecord> = data.patients.iter().collect();
    let (_, grad) = Pipeline::new(&params, &cfg).unwrap().loss_and_grad(&refs, 2).unwrap();
    let worst = grad.to_flat().iter().fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn analytic_gradient_matches_differences_for_ablations() {
    let data = cohort(5, 8);
    let refs: Vec<&PatientRecord> = data.patients.iter().collect();
    for variant in [Ablation::NoExplore, Ablation::NoRca, Ablation::NoRfr, Ablation::NoMoe] {
        let cfg = TrainConfig {
            ablation: variant,
            ..TrainConfig::small()
        };
        let params = init(&cfg, 3);
        let segment = if variant == Ablation::NoRfr { 8 } else { 2 };
        let (_, analytic) = Pipeline::new(&params, &cfg).unwrap().loss_and_grad(&refs, segment).unwrap();
        let numeric = numeric_gradient(&params, &cfg, &refs, segment, 1e-5).unwrap();
        let rows = compare_gradients(&analytic, &numeric).unwrap();
        let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        assert!(worst < 1e-4, "{variant}: {worst}");
    }
}

#[test]
fn decoupling_gradient_stays_inside_the_decoupling_path() {
    let data = cohort(4, 9);
    let refs: Vec<&PatientRecord> = data.patients.iter().collect();
    let surv_only = TrainConfig { alpha: 0.0, ..tiny() };
    let with_dis = TrainConfig { alpha: 1.0, ..tiny() };
    let params = init(&surv_only, 2);
    let (_, g0) = Pipeline::new(&params, &surv_only).unwrap().loss_and_grad(&refs, 2).unwrap();
    let (_, g1) = Pipeline::new(&params, &with_dis).unwrap().loss_and_grad(&refs, 2).unwrap();
    for path in params.paths().into_iter().filter(|p| p.starts_with("moe.")) {
        assert_eq!(g0.get(&path), g1.get(&path), "{path}");
    }
    assert_ne!(g0.get("specific_m1.weight"), g1.get("specific_m1.weight"));
}

#[test]
fn leave_one_out_folds_are_all_flagged() {
    let data = cohort(12, 10);
    let cfg = TrainConfig { epochs: 1, ..tiny() };
    let report = cross_validate(&data, 12, &cfg).unwrap();
    assert!(report.folds.iter().all(|f| f.flag.is_some() && f.c_index.is_none()));
    assert_eq!(report.mean, None);
    assert_eq!(report.rows().len(), 12);
}

#[test]
fn cross_validation_is_reproducible() {
    let data = cohort(30, 11);
    let cfg = TrainConfig { epochs: 2, ..tiny() };
    let a = cross_validate(&data, 3, &cfg).unwrap();
    let b = cross_validate(&data, 3, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.folds.iter().map(|f| f.n_val).sum::<usize>(), 30);
    assert_eq!(a.out_of_fold.len(), 30);
    assert!(cross_validate(&data, 1, &cfg).is_err());
    assert!(cross_validate(&data, 31, &cfg).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = cohort(6, 12);
    let cfg = tiny();
    let (params, _) = train_model(&data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&params, &cfg, &path).unwrap();
    let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(loaded.to_flat(), params.to_flat());
    assert_eq!(
        predict_risks(&loaded, &loaded_cfg, &data).unwrap(),
        predict_risks(&params, &cfg, &data).unwrap()
    );
}

#[test]
fn checkpoint_schema_errors_name_the_field() {
    let cfg = tiny();
    let params = init(&cfg, 0);
    let json = checkpoint_json(&params, &cfg).unwrap();

    let mut short = json.clone();
    short["tensors"]["moe.gate"].as_array_mut().unwrap().pop();
    let err = parse_checkpoint(&short.to_string()).unwrap_err();
    assert!(matches!(&err, Error::Schema { field, .. } if field == "tensors.moe.gate"), "{err}");

    let mut missing = json.clone();
    missing["tensors"].as_object_mut().unwrap().remove("direct_head.weight");
    missing["tensors"].as_object_mut().unwrap().remove("encoder_m1.query");
    let err = parse_checkpoint(&missing.to_string()).unwrap_err();
    assert!(err.to_string().contains("tensors."), "{err}");

    let mut version = json;
    version["version"] = 99.into();
    let err = parse_checkpoint(&version.to_string()).unwrap_err();
    assert!(matches!(&err, Error::Schema { field, .. } if field == "version"), "{err}");

    assert!(matches!(parse_checkpoint("not json"), Err(Error::Schema { .. })));
}
