//! Acceptance criteria; prints one PASS/FAIL line each and exits nonzero on any failure.
//! Criteria 9-11 share one cross-validation run. Name filters given as
//! arguments select criteria, e.g. `-- criterion_0`.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use survfuse::datasets::generate_synthetic_cohort;
use survfuse::decoupling::{decoupling_loss, rca_core, regional_cross_attention, DecoupledBundle, RcaParams};
use survfuse::eval::{concordance_index, kaplan_meier, logrank_test, metrics_csv, MetricRow};
use survfuse::moe::gate;
use survfuse::nn::Linear;
use survfuse::reorganize::{build_plan, reorganize};
use survfuse::survival::{nll_loss, total_loss, SurvivalLabel};
use survfuse::train::{cross_validate, gradient_check, run_ablation, CvReport};
use survfuse::{Ablation, DistanceMetric, RiskRecord, SynthConfig, TrainConfig};

fn report(criterion: u32, pass: bool, detail: &str) {
    println!("[{}] criterion {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
}

fn criterion_01_reorganization_is_a_bijection() -> bool {
    let start = Instant::now();
    let width = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ok = true;
    for s in [2, 8, 16, 32, 64] {
        for arity in [3, 4] {
            let plan = build_plan(width, s, arity).unwrap();
            let mut seen = vec![false; width * arity];
            for &d in plan.destinations() {
                ok &= d < seen.len() && !seen[d];
                seen[d] = true;
            }
            ok &= seen.iter().all(|&x| x);
            let input = random_vec(&mut rng, width * arity);
            let out = plan.apply(&input);
            ok &= plan.invert(&out) == input;
            let mut a = input.clone();
            let mut b = out.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            ok &= a == b;
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            ok &= (norm(&input) - norm(&out)).abs() <= 1e-12 * norm(&input);
        }
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(1);
    report(1, ok, &format!("bijection, exact inverse, multiset and norm kept for s in S, {elapsed:?}"));
    ok
}

fn criterion_02_full_segment_is_plain_concatenation() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feature = |rng: &mut ChaCha8Rng| Array1::from(random_vec(rng, 128));
    let bundle = DecoupledBundle {
        sp1: feature(&mut rng),
        sp2: feature(&mut rng),
        share: feature(&mut rng),
        explore: Some(feature(&mut rng)),
    };
    let mut expected = Vec::new();
    for f in [&bundle.sp1, &bundle.sp2, &bundle.share, bundle.explore.as_ref().unwrap()] {
        expected.extend(f.iter().copied());
    }
    let out = reorganize(&bundle, &build_plan(128, 128, 4).unwrap()).unwrap();
    let ok = out == expected;
    report(2, ok, "s = C2 reproduces [sp1|sp2|share|explore] exactly");
    ok
}

fn criterion_03_gate_weights_lie_on_the_simplex() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, n) = (32, 4);
    let mut worst: f64 = 0.0;
    let mut nonneg = true;
    for _ in 0..1000 {
        let w = Array2::from_shape_fn((d, n), |_| rng.random_range(-2.0..2.0));
        let x = Array1::from(random_vec(&mut rng, d));
        let g = gate(&x.view(), &w.view()).unwrap();
        nonneg &= g.as_slice().iter().all(|&v| v >= 0.0);
        worst = worst.max((g.as_slice().iter().sum::<f64>() - 1.0).abs());
    }
    let x = Array1::from(random_vec(&mut rng, d));
    let uniform = gate(&x.view(), &Array2::zeros((d, n)).view()).unwrap();
    let exact = uniform.as_slice().iter().all(|&v| v == 1.0 / n as f64);
    let ok = nonneg && worst <= 1e-6 && exact;
    report(3, ok, &format!("1000 draws nonnegative, max |sum - 1| = {worst:.1e}, W = 0 gives 1/N"));
    ok
}

fn identity_rca(d: usize) -> RcaParams {
    let eye = Linear {
        weight: Array2::eye(d),
        bias: Array1::zeros(d),
    };
    RcaParams {
        fc1: eye.clone(),
        fc2: eye,
    }
}

fn criterion_04_cross_attention_fixtures() -> bool {
    let e = std::f64::consts::E;
    let a = (e.powi(2) + 2.0 * e.powi(4)) / (e.powi(2) + e.powi(4));
    let b = (2.0 * e.powi(2) + e) / (e.powi(2) + e);
    let oracle = 0.5 * (a + b);
    let out = regional_cross_attention(&Array1::from(vec![1.0]).view(), &Array1::from(vec![2.0]).view(), &identity_rca(1))
        .unwrap()[0];
    let fixture_ok = (out - oracle).abs() < 1e-9 && (out - 1.8059).abs() < 5e-5;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = random_vec(&mut rng, 16);
    let core = rca_core(&v, &v, 1.0);
    let sym = core
        .branch_a
        .iter()
        .zip(&core.branch_b)
        .chain(core.output.iter().zip(&core.branch_a))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let (v1, v2) = (random_vec(&mut rng, 16), random_vec(&mut rng, 16));
    let core = rca_core(&v1, &v2, 1.0);
    let mut col_err: f64 = 0.0;
    for m in [core.column_softmax_a(), core.column_softmax_b()] {
        assert_eq!(m.dim(), (32, 16));
        for col in m.columns() {
            col_err = col_err.max((col.sum() - 1.0).abs());
        }
    }
    let ok = fixture_ok && sym <= 1e-12 && col_err <= 1e-12;
    report(
        4,
        ok,
        &format!("d=1 output {out:.10} vs {oracle:.10}; symmetry gap {sym:.1e}; column sums {col_err:.1e}"),
    );
    ok
}

fn criterion_05_loss_fixtures() -> bool {
    let h = [0.2, 0.4];
    let event = nll_loss(&h, SurvivalLabel { bin: 2, censored: false }).unwrap();
    let censored = nll_loss(&h, SurvivalLabel { bin: 2, censored: true }).unwrap();
    let event_oracle = -(0.4f64.ln()) - (0.8f64.ln());
    let censored_oracle = -(0.8f64 * 0.6).ln();
    let nll_ok = (event - event_oracle).abs() < 1e-9
        && (censored - censored_oracle).abs() < 1e-9
        && (event - 1.1394).abs() < 5e-5
        && (censored - 0.7340).abs() < 5e-5;

    let bundle = DecoupledBundle {
        sp1: Array1::from(vec![1.0, 0.0]),
        sp2: Array1::from(vec![0.0, 1.0]),
        share: Array1::from(vec![0.5, 0.5]),
        explore: Some(Array1::from(vec![0.5, 0.5])),
    };
    let dis = decoupling_loss(&bundle, DistanceMetric::Mse).unwrap();
    let dis_ok = dis.abs() < 1e-12;

    let default_alpha = TrainConfig::default().alpha;
    let (s, d) = (event, 0.37);
    let linear = [0.0, 0.5, 1.0, 2.0]
        .iter()
        .all(|&a| (total_loss(s, d, a) - (s + a * d)).abs() < 1e-15);
    let ok = nll_ok && dis_ok && linear && default_alpha == 1.0;
    report(
        5,
        ok,
        &format!("event {event:.10}, censored {censored:.10}, decoupling {dis:.1e}, linear in alpha (default {default_alpha})"),
    );
    ok
}

fn criterion_06_gradient_check() -> bool {
    let start = Instant::now();
    let cfg = TrainConfig::small();
    assert_eq!((cfg.c1, cfg.c2, cfg.n_experts, cfg.n_bins), (8, 8, 4, 4));
    let mut worst = (0.0, String::new(), 0, 0);
    for seed in 0..20 {
        for &s in &cfg.segments {
            let r = gradient_check(&cfg, seed, s).unwrap();
            let row = r.worst_path().unwrap();
            if row.max_rel_error > worst.0 {
                worst = (row.max_rel_error, row.path.clone(), seed, s);
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = worst.0 < 1e-4 && elapsed < Duration::from_secs(120);
    report(
        6,
        ok,
        &format!(
            "worst relative error {:.2e} at {} (seed {}, s = {}) over 20 seeds, {elapsed:.1?}",
            worst.0, worst.1, worst.2, worst.3
        ),
    );
    ok
}

fn brute_force_c_index(r: &[RiskRecord]) -> Option<f64> {
    let (mut conc, mut ties, mut comp) = (0u64, 0u64, 0u64);
    for i in 0..r.len() {
        for j in 0..r.len() {
            if r[i].event && r[i].time < r[j].time {
                comp += 1;
                if r[i].risk > r[j].risk {
                    conc += 1;
                } else if r[i].risk == r[j].risk {
                    ties += 1;
                }
            }
        }
    }
    (comp > 0).then(|| (conc as f64 + 0.5 * ties as f64) / comp as f64)
}

fn criterion_07_c_index_matches_brute_force() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = true;
    let mut checked = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let records: Vec<RiskRecord> = (0..n)
            .map(|_| RiskRecord {
                risk: rng.random_range(0..6) as f64,
                time: rng.random_range(1..12) as f64,
                event: rng.random_bool(0.6),
            })
            .collect();
        match (concordance_index(&records).ok(), brute_force_c_index(&records)) {
            (Some(a), Some(b)) => {
                ok &= a == b;
                checked += 1;
            }
            (None, None) => {}
            _ => ok = false,
        }
    }
    let rec = |risk: f64, time: f64| RiskRecord { risk, time, event: true };
    let perfect = concordance_index(&[rec(3.0, 1.0), rec(2.0, 2.0), rec(1.0, 3.0)]).unwrap();
    let reversed = concordance_index(&[rec(1.0, 1.0), rec(2.0, 2.0), rec(3.0, 3.0)]).unwrap();
    let tied = concordance_index(&[rec(1.0, 1.0), rec(1.0, 2.0), rec(1.0, 3.0)]).unwrap();
    ok &= perfect == 1.0 && reversed == 0.0 && tied == 0.5;
    report(7, ok, &format!("exact agreement on {checked} of 200 instances with pairs; fixtures 1.0/0.0/0.5"));
    ok
}

fn criterion_08_kaplan_meier_and_logrank_fixtures() -> bool {
    let km = kaplan_meier(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
    let km_ok = km.survival_at(1.0) == 2.0 / 3.0 && km.survival_at(3.0) == 0.0;

    let group: Vec<RiskRecord> = [(1.0, true), (2.0, true), (3.0, false), (4.0, true)]
        .iter()
        .map(|&(time, event)| RiskRecord { risk: 0.0, time, event })
        .collect();
    let same = logrank_test(&group, &group).unwrap();
    let same_ok = same.chi2 == 0.0 && same.p == 1.0;

    let early: Vec<RiskRecord> = (1..=10)
        .map(|t| RiskRecord {
            risk: 1.0,
            time: t as f64,
            event: true,
        })
        .collect();
    let late: Vec<RiskRecord> = (1..=10)
        .map(|t| RiskRecord {
            risk: 0.0,
            time: 20.0 + t as f64,
            event: true,
        })
        .collect();
    let apart = logrank_test(&early, &late).unwrap();
    let ok = km_ok && same_ok && apart.p < 0.05;
    report(
        8,
        ok,
        &format!(
            "S(1) = {}, S(3) = {}; identical chi2 {} p {}; separated p {:.2e}",
            km.survival_at(1.0),
            km.survival_at(3.0),
            same.chi2,
            same.p,
            apart.p
        ),
    );
    ok
}

fn learnability_cohort(seed: u64) -> survfuse::Cohort {
    generate_synthetic_cohort(&SynthConfig {
        n_patients: 500,
        w_shared: 1.0,
        w_interact: 1.0,
        w_spec1: 0.0,
        w_spec2: 0.0,
        noise_sigma: 0.5,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn reference_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-4,
        weight_decay: 1e-5,
        epochs: 30,
        alpha: 1.0,
        seed,
        ..TrainConfig::default()
    }
}

fn run_learnability() -> (Vec<CvReport>, String, Duration) {
    let start = Instant::now();
    let reports: Vec<CvReport> = [0, 1, 2]
        .iter()
        .map(|&seed| cross_validate(&learnability_cohort(seed), 5, &reference_config(seed)).unwrap())
        .collect();
    let rows: Vec<MetricRow> = reports.iter().flat_map(|r| r.rows()).collect();
    (reports, metrics_csv(&rows), start.elapsed())
}

fn well_formed(csv: &str, expected_rows: usize) -> bool {
    let mut lines = csv.lines();
    if lines.next() != Some("fold,c_index,chi2,p,variant,seed") {
        return false;
    }
    let rows: Vec<&str> = lines.collect();
    rows.len() == expected_rows
        && rows.iter().all(|line| {
            let f: Vec<&str> = line.split(',').collect();
            f.len() == 6
                && f[1..4].iter().all(|v| v.parse::<f64>().is_ok())
                && f[1].parse::<f64>().is_ok_and(|c| c.is_nan() || (0.0..=1.0).contains(&c))
                && f[4].parse::<Ablation>().is_ok()
                && f[5].parse::<u64>().is_ok()
        })
}

fn criteria_09_10_11_end_to_end() -> bool {
    // 9: learnability
    let (reports, csv, elapsed) = run_learnability();
    let means: Vec<f64> = reports.iter().map(|r| r.mean.unwrap_or(f64::NAN)).collect();
    let ok9 = means.iter().all(|&m| m >= 0.65) && elapsed < Duration::from_secs(600);
    let shown: Vec<String> = reports
        .iter()
        .map(|r| format!("seed {}: {:.4}±{:.4}", r.seed, r.mean.unwrap_or(f64::NAN), r.std.unwrap_or(f64::NAN)))
        .collect();
    report(9, ok9, &format!("mean validation C-index {} (need >= 0.65), {elapsed:.1?}", shown.join(", ")));

    // 10: every ablation variant on the seed-0 cohort; the full model row is the run above
    let cohort = learnability_cohort(0);
    let mut summary = vec![reports[0].summary_row()];
    let mut lines = vec![reports[0].summary()];
    for variant in &Ablation::ALL[1..] {
        let r = run_ablation(&cohort, *variant, 5, &reference_config(0)).unwrap();
        lines.push(r.summary());
        summary.push(r.summary_row());
    }
    let ablation_csv = metrics_csv(&summary);
    let ok10 = well_formed(&ablation_csv, 5) && well_formed(&csv, 15);
    report(10, ok10, &format!("5 well-formed metric rows: {}", lines.join("; ")));

    // 11: determinism
    let (_, again, _) = run_learnability();
    let ok11 = again == csv;
    report(11, ok11, &format!("repeat run metrics CSV bit-identical ({} bytes)", csv.len()));

    ok9 && ok10 && ok11
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let all: [(&str, fn() -> bool); 9] = [
        ("criterion_01_reorganization_is_a_bijection", criterion_01_reorganization_is_a_bijection),
        ("criterion_02_full_segment_is_plain_concatenation", criterion_02_full_segment_is_plain_concatenation),
        ("criterion_03_gate_weights_lie_on_the_simplex", criterion_03_gate_weights_lie_on_the_simplex),
        ("criterion_04_cross_attention_fixtures", criterion_04_cross_attention_fixtures),
        ("criterion_05_loss_fixtures", criterion_05_loss_fixtures),
        ("criterion_06_gradient_check", criterion_06_gradient_check),
        ("criterion_07_c_index_matches_brute_force", criterion_07_c_index_matches_brute_force),
        ("criterion_08_kaplan_meier_and_logrank_fixtures", criterion_08_kaplan_meier_and_logrank_fixtures),
        ("criteria_09_10_11_end_to_end", criteria_09_10_11_end_to_end),
    ];
    let mut failed = 0;
    for (name, run) in all {
        if filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str())) {
            if !run() {
                failed += 1;
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} check group(s) failed");
        std::process::exit(1);
    }
}
