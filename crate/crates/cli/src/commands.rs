use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use survfuse::datasets::{assign_time_bins, generate_synthetic_cohort, load_cohort, save_cohort};
use survfuse::decoupling::FEATURE_NAMES;
use survfuse::eval::{concordance_index, kaplan_meier, km_csv, logrank_test, metrics_csv, stratify_by_median};
use survfuse::train::{
    cross_validate, gradient_check, load_checkpoint, predict_risks, run_ablation, save_checkpoint, train_model,
};
use survfuse::{Ablation, Cohort, ModelParams, PatientRecord, Pipeline, RiskRecord, TrainConfig};

use crate::settings::{required, RunConfig};
use crate::svg;
use crate::CliError;

fn write_output(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::internal(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::internal(format!("cannot write {}: {e}", path.display())))
}

fn load_input_cohort(cfg: &RunConfig) -> Result<Cohort, CliError> {
    let path = required(&cfg.cohort, "cohort", true)?;
    let cohort = load_cohort(&path)?;
    if cohort.is_empty() {
        return Err(CliError::usage(format!("{} holds no patients", path.display())));
    }
    Ok(cohort)
}

fn token_dim(cohort: &Cohort) -> usize {
    cohort.token_dim().unwrap_or(0)
}

/// Binned copy of the cohort unless it already carries `n_bins` bins.
fn binned(cohort: &Cohort, n_bins: usize) -> Result<Cohort, CliError> {
    if cohort.is_binned() && cohort.n_bins == Some(n_bins) {
        Ok(cohort.clone())
    } else {
        Ok(assign_time_bins(cohort, n_bins)?)
    }
}

fn load_model(cfg: &RunConfig, cohort: &Cohort) -> Result<(ModelParams, TrainConfig), CliError> {
    let path = required(&cfg.checkpoint, "checkpoint", true)?;
    let (params, train_cfg) = load_checkpoint(&path)?;
    if cohort.token_dim() != Some(train_cfg.token_dim) {
        return Err(CliError::usage(format!(
            "checkpoint expects token width {}, cohort has {}",
            train_cfg.token_dim,
            token_dim(cohort)
        )));
    }
    Pipeline::new(&params, &train_cfg)?;
    Ok((params, train_cfg))
}

fn risks_csv(cohort: &Cohort, risks: &[RiskRecord]) -> String {
    let mut out = String::from("id,risk,time,event\n");
    for (p, r) in cohort.patients.iter().zip(risks) {
        let _ = writeln!(out, "{},{},{},{}", p.id, r.risk, r.time, u8::from(r.event));
    }
    out
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let out = required(&cfg.out, "out", false)?;
    let synth = cfg.synth_config();
    if synth.n_patients == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let cohort = binned(&generate_synthetic_cohort(&synth)?, cfg.n_bins())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_cohort(&cohort, &out)?;
    let edges: Vec<String> = cohort.bin_edges.iter().map(|e| format!("{e:.4}")).collect();
    println!("patients: {}", cohort.len());
    println!("event rate: {:.4}", cohort.event_rate());
    println!("bin edges: [{}]", edges.join(", "));
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let cohort = load_input_cohort(cfg)?;
    let out = required(&cfg.out, "out", false)?;
    let train_cfg = cfg.train_config(token_dim(&cohort))?;
    let cohort = binned(&cohort, train_cfg.n_bins)?;
    let (params, history) = train_model(&cohort, &train_cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(&params, &train_cfg, &out)?;
    if let Some(path) = &cfg.history {
        write_output(path, &history.to_csv())?;
    }
    if let Some(last) = history.epochs.last() {
        println!(
            "epoch {}: L_surv {:.5} L_dis {:.5} total {:.5}",
            last.epoch, last.surv, last.dis, last.total
        );
    }
    println!("parameters: {}", params.num_params());
    Ok(())
}

pub fn cv(cfg: &RunConfig) -> Result<(), CliError> {
    let cohort = load_input_cohort(cfg)?;
    let out = required(&cfg.out, "out", false)?;
    let train_cfg = cfg.train_config(token_dim(&cohort))?;
    let report = cross_validate(&cohort, cfg.folds(), &train_cfg)?;
    for f in &report.folds {
        if let Some(flag) = &f.flag {
            eprintln!("warning: fold {} flagged and excluded from the mean: {flag}", f.fold);
        }
    }
    write_output(&out, &metrics_csv(&report.rows()))?;
    if let Some(path) = &cfg.predictions {
        write_output(path, &risks_csv(&cohort, &report.out_of_fold))?;
    }
    println!("{}", report.summary());
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let cohort = load_input_cohort(cfg)?;
    let out = required(&cfg.out, "out", false)?;
    let base = cfg.train_config(token_dim(&cohort))?;
    let mut rows = Vec::new();
    for variant in Ablation::ALL {
        let report = run_ablation(&cohort, variant, cfg.folds(), &base)?;
        println!("{}", report.summary());
        rows.push(report.summary_row());
    }
    write_output(&out, &metrics_csv(&rows))
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let cohort = load_input_cohort(cfg)?;
    let out = required(&cfg.out, "out", false)?;
    let (params, train_cfg) = load_model(cfg, &cohort)?;
    let risks = predict_risks(&params, &train_cfg, &cohort)?;
    write_output(&out, &risks_csv(&cohort, &risks))?;
    match concordance_index(&risks) {
        Ok(c) => println!("C-index: {c:.4}"),
        Err(e) => eprintln!("warning: {e}"),
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct RiskRow {
    risk: f64,
    time: f64,
    event: u8,
}

fn read_risks(path: &PathBuf) -> Result<Vec<RiskRecord>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<RiskRow>().enumerate() {
        let row = row.map_err(|e| CliError::usage(format!("{} row {}: {e}", path.display(), i + 1)))?;
        if row.event > 1 {
            return Err(CliError::usage(format!("{} row {}: event must be 0 or 1", path.display(), i + 1)));
        }
        records.push(RiskRecord {
            risk: row.risk,
            time: row.time,
            event: row.event == 1,
        });
    }
    Ok(records)
}

pub fn plot_km(cfg: &RunConfig) -> Result<(), CliError> {
    let risks_path = required(&cfg.risks, "risks", true)?;
    let out = required(&cfg.out, "out", false)?;
    let records = read_risks(&risks_path)?;
    let (high, low) = stratify_by_median(&records)?;
    let test = logrank_test(&high, &low)?;
    let curve = |group: &[RiskRecord]| {
        let times: Vec<f64> = group.iter().map(|r| r.time).collect();
        let events: Vec<bool> = group.iter().map(|r| r.event).collect();
        kaplan_meier(&times, &events)
    };
    let (km_low, km_high) = (curve(&low)?, curve(&high)?);
    let max_time = records.iter().map(|r| r.time).fold(0.0, f64::max);
    write_output(&out, &svg::km_plot(&km_low, &km_high, test.p, max_time))?;
    let points = cfg.points.clone().unwrap_or_else(|| out.with_extension("csv"));
    write_output(
        &points,
        &km_csv(&[("low", &km_low, low.len()), ("high", &km_high, high.len())]),
    )?;
    println!(
        "low: {} patients, high: {} patients, chi2 = {:.4}, p = {}",
        low.len(),
        high.len(),
        test.chi2,
        svg::format_p(test.p)
    );
    Ok(())
}

pub fn plot_gates(cfg: &RunConfig) -> Result<(), CliError> {
    let cohort = load_input_cohort(cfg)?;
    let out = required(&cfg.out, "out", false)?;
    let (params, train_cfg) = load_model(cfg, &cohort)?;
    if params.gate_matrix().is_none() {
        return Err(CliError::usage("checkpoint was trained without a gating network"));
    }
    let pipe = Pipeline::new(&params, &train_cfg)?;
    let segment = train_cfg.eval_segment_length()?;
    let mut totals = vec![0.0; train_cfg.n_experts];
    for chunk in cohort.patients.chunks(64) {
        let refs: Vec<&PatientRecord> = chunk.iter().collect();
        for f in pipe.forward_many(&refs, segment)? {
            let gates = f.gate_weights.expect("gated model");
            for (t, g) in totals.iter_mut().zip(gates.as_slice()) {
                *t += g;
            }
        }
    }
    let mean: Vec<f64> = totals.iter().map(|t| t / cohort.len() as f64).collect();
    write_output(&out, &svg::gate_plot(&mean))?;
    let shown: Vec<String> = mean.iter().map(|w| format!("{w:.4}")).collect();
    println!("average gate weights: [{}]", shown.join(", "));
    println!("sum: {:.6}", mean.iter().sum::<f64>());
    Ok(())
}

pub fn export_embeddings(cfg: &RunConfig) -> Result<(), CliError> {
    let cohort = load_input_cohort(cfg)?;
    let out = required(&cfg.out, "out", false)?;
    let (params, train_cfg) = load_model(cfg, &cohort)?;
    let pipe = Pipeline::new(&params, &train_cfg)?;
    let segment = train_cfg.eval_segment_length()?;
    let mut text = String::from("id,feature");
    for j in 0..train_cfg.c2 {
        let _ = write!(text, ",v{j}");
    }
    text.push('\n');
    let mut rows = 0;
    for chunk in cohort.patients.chunks(64) {
        let refs: Vec<&PatientRecord> = chunk.iter().collect();
        for (p, f) in chunk.iter().zip(pipe.forward_many(&refs, segment)?) {
            for (name, feature) in FEATURE_NAMES.iter().zip(f.bundle.features()) {
                let _ = write!(text, "{},{name}", p.id);
                for v in feature.iter() {
                    let _ = write!(text, ",{v}");
                }
                text.push('\n');
                rows += 1;
            }
        }
    }
    write_output(&out, &text)?;
    println!("rows: {rows}");
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, seeds: u64) -> Result<(), CliError> {
    let small = TrainConfig::small();
    let start = cfg.seed.unwrap_or(0);
    let mut text = String::from("seed,segment,path,max_rel_error,max_abs_error\n");
    let mut worst: Option<(f64, String, u64, usize)> = None;
    for seed in start..start + seeds {
        for &segment in &small.segments {
            let report = gradient_check(&small, seed, segment)?;
            for row in &report.rows {
                let _ = writeln!(
                    text,
                    "{seed},{segment},{},{:e},{:e}",
                    row.path, row.max_rel_error, row.max_abs_error
                );
                if worst.as_ref().is_none_or(|w| row.max_rel_error > w.0) {
                    worst = Some((row.max_rel_error, row.path.clone(), seed, segment));
                }
            }
        }
    }
    if let Some(out) = &cfg.out {
        write_output(out, &text)?;
    }
    if let Some((err, path, seed, segment)) = worst {
        println!("worst relative error {err:.3e} at {path} (seed {seed}, segment {segment})");
    }
    Ok(())
}
