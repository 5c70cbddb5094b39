//! Synthetic multimodal cohorts, time binning and the cohort JSON format.
//!
//! A synthetic patient carries three latent blocks: a shared factor `z_s`
//! visible to both modalities and one private factor per modality. The
//! log-hazard mixes all of them plus a cross-modal interaction term, so a model
//! must combine both token streams to recover the full risk.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

pub const COHORT_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    /// `I1 × C0` token features of modality 1.
    pub tokens_m1: Array2<f64>,
    /// `I2 × C0` token features of modality 2.
    pub tokens_m2: Array2<f64>,
    pub time: f64,
    /// `true` when the event was observed, `false` when censored.
    pub event: bool,
    /// 1-based discrete time bin, present once the cohort is binned.
    pub bin: Option<usize>,
}

impl PatientRecord {
    /// Censoring indicator in the likelihood's convention (1 = censored).
    pub fn censored(&self) -> f64 {
        if self.event {
            0.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub n_bins: Option<usize>,
    pub bin_edges: Vec<f64>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn is_binned(&self) -> bool {
        self.n_bins.is_some() && self.patients.iter().all(|p| p.bin.is_some())
    }

    pub fn event_rate(&self) -> f64 {
        if self.patients.is_empty() {
            return 0.0;
        }
        self.patients.iter().filter(|p| p.event).count() as f64 / self.patients.len() as f64
    }

    /// Sub-cohort with the given patient indices, keeping the binning.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
            n_bins: self.n_bins,
            bin_edges: self.bin_edges.clone(),
        }
    }

    /// Token dimension shared by both modalities, if the cohort is nonempty.
    pub fn token_dim(&self) -> Option<usize> {
        self.patients.first().map(|p| p.tokens_m1.ncols())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub k_shared: usize,
    pub k_spec: usize,
    pub tokens_m1: usize,
    pub tokens_m2: usize,
    pub token_dim: usize,
    pub w_shared: f64,
    pub w_spec1: f64,
    pub w_spec2: f64,
    pub w_interact: f64,
    pub noise_sigma: f64,
    /// Upper end of the uniform censoring window; `f64::INFINITY` disables censoring.
    pub censor_horizon: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 500,
            k_shared: 1,
            k_spec: 2,
            tokens_m1: 8,
            tokens_m2: 8,
            token_dim: 16,
            w_shared: 1.0,
            w_spec1: 0.5,
            w_spec2: 0.5,
            w_interact: 1.0,
            noise_sigma: 0.5,
            censor_horizon: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_patients", self.n_patients),
            ("k_shared", self.k_shared),
            ("k_spec", self.k_spec),
            ("tokens_m1", self.tokens_m1),
            ("tokens_m2", self.tokens_m2),
            ("token_dim", self.token_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise_sigma must be finite and nonnegative"));
        }
        if !(self.censor_horizon > 0.0) {
            return Err(Error::config("censor_horizon must be positive"));
        }
        for (name, w) in [
            ("w_shared", self.w_shared),
            ("w_spec1", self.w_spec1),
            ("w_spec2", self.w_spec2),
            ("w_interact", self.w_interact),
        ] {
            if !w.is_finite() {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Draws the synthetic cohort and also returns each patient's planted log-hazard.
pub fn generate_with_truth(cfg: &SynthConfig) -> Result<(Cohort, Vec<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent = cfg.k_shared + cfg.k_spec;
    let scale = 1.0 / (latent as f64).sqrt();
    let map_m1 = Array2::from_shape_simple_fn((latent, cfg.token_dim), || {
        scale * normal(&mut rng)
    });
    let map_m2 = Array2::from_shape_simple_fn((latent, cfg.token_dim), || {
        scale * normal(&mut rng)
    });

    let mut patients = Vec::with_capacity(cfg.n_patients);
    let mut risks = Vec::with_capacity(cfg.n_patients);
    for idx in 0..cfg.n_patients {
        let zs = normal_vec(&mut rng, cfg.k_shared);
        let z1 = normal_vec(&mut rng, cfg.k_spec);
        let z2 = normal_vec(&mut rng, cfg.k_spec);
        let inter: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a * b).collect();
        let risk = cfg.w_shared * mean(&zs)
            + cfg.w_spec1 * mean(&z1)
            + cfg.w_spec2 * mean(&z2)
            + cfg.w_interact * mean(&inter);

        let event_time = Exp::new(risk.exp())
            .map_err(|e| Error::Numeric(format!("hazard rate for patient {idx}: {e}")))?
            .sample(&mut rng)
            .max(f64::MIN_POSITIVE);
        let censor_time = if cfg.censor_horizon.is_finite() {
            loop {
                let c: f64 = rng.random::<f64>() * cfg.censor_horizon;
                if c > 0.0 {
                    break c;
                }
            }
        } else {
            f64::INFINITY
        };
        let event = event_time <= censor_time;
        let time = event_time.min(censor_time);

        let tokens_m1 = modality_tokens(&mut rng, &zs, &z1, &map_m1, cfg.tokens_m1, cfg.noise_sigma);
        let tokens_m2 = modality_tokens(&mut rng, &zs, &z2, &map_m2, cfg.tokens_m2, cfg.noise_sigma);

        patients.push(PatientRecord {
            id: format!("P{idx:05}"),
            tokens_m1,
            tokens_m2,
            time,
            event,
            bin: None,
        });
        risks.push(risk);
    }
    Ok((
        Cohort {
            patients,
            n_bins: None,
            bin_edges: Vec::new(),
        },
        risks,
    ))
}

pub fn generate_synthetic_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    generate_with_truth(cfg).map(|(c, _)| c)
}

fn modality_tokens(
    rng: &mut ChaCha8Rng,
    shared: &[f64],
    private: &[f64],
    map: &Array2<f64>,
    n_tokens: usize,
    noise_sigma: f64,
) -> Array2<f64> {
    let latent: Vec<f64> = shared.iter().chain(private).copied().collect();
    let signal: Vec<f64> = (0..map.ncols())
        .map(|c| latent.iter().enumerate().map(|(r, z)| z * map[[r, c]]).sum())
        .collect();
    let mut tokens = Array2::zeros((n_tokens, map.ncols()));
    for mut row in tokens.rows_mut() {
        for (x, s) in row.iter_mut().zip(&signal) {
            let noise: f64 = StandardNormal.sample(rng);
            *x = s + noise_sigma * noise;
        }
    }
    tokens
}

/// Linear-interpolation quantile of sorted data (the `(m-1)p` convention).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bin index of `time` given ascending edges: `1 + #(edges < time)`, clamped.
pub fn bin_for_time(edges: &[f64], n_bins: usize, time: f64) -> usize {
    (1 + edges.iter().filter(|&&e| e < time).count()).clamp(1, n_bins)
}

/// Quantile-bins the cohort on its uncensored event times.
pub fn assign_time_bins(cohort: &Cohort, n_bins: usize) -> Result<Cohort> {
    if n_bins == 0 {
        return Err(Error::config("n_bins must be at least 1"));
    }
    let mut times: Vec<f64> = cohort.patients.iter().filter(|p| p.event).map(|p| p.time).collect();
    times.sort_by(f64::total_cmp);
    let mut distinct = times.clone();
    distinct.dedup();
    if distinct.len() < n_bins {
        return Err(Error::Data(format!(
            "need at least {n_bins} distinct uncensored times to form {n_bins} bins, found {}",
            distinct.len()
        )));
    }
    let edges: Vec<f64> = (1..n_bins)
        .map(|j| quantile_sorted(&times, j as f64 / n_bins as f64))
        .collect();
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Data(
            "tied uncensored times give non-increasing bin edges".into(),
        ));
    }
    let patients = cohort
        .patients
        .iter()
        .map(|p| PatientRecord {
            bin: Some(bin_for_time(&edges, n_bins, p.time)),
            ..p.clone()
        })
        .collect();
    Ok(Cohort {
        patients,
        n_bins: Some(n_bins),
        bin_edges: edges,
    })
}

fn matrix_to_json(m: &Array2<f64>) -> Value {
    Value::Array(m.rows().into_iter().map(|r| json!(r.to_vec())).collect())
}

pub fn cohort_to_json(cohort: &Cohort) -> Value {
    let patients: Vec<Value> = cohort
        .patients
        .iter()
        .map(|p| {
            json!({
                "id": p.id,
                "time": p.time,
                "event": u8::from(p.event),
                "bin": p.bin,
                "m1_tokens": matrix_to_json(&p.tokens_m1),
                "m2_tokens": matrix_to_json(&p.tokens_m2),
            })
        })
        .collect();
    json!({
        "schema": COHORT_SCHEMA_VERSION,
        "n_bins": cohort.n_bins,
        "bin_edges": cohort.bin_edges,
        "patients": patients,
    })
}

pub fn save_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string(&cohort_to_json(cohort))
        .map_err(|e| Error::Numeric(format!("cohort serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    let text = std::fs::read_to_string(path)?;
    parse_cohort(&text)
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        field: field.into(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| schema(format!("{ctx}{name}"), "missing field"))
}

fn as_f64(v: &Value, name: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| schema(name, "expected a number"))
}

fn parse_matrix(v: &Value, name: &str) -> Result<Array2<f64>> {
    let rows = v.as_array().ok_or_else(|| schema(name, "expected an array of rows"))?;
    let mut data = Vec::new();
    let mut width = None;
    for (r, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| schema(format!("{name}[{r}]"), "expected an array"))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(schema(format!("{name}[{r}]"), "ragged token matrix"));
            }
            _ => {}
        }
        for (c, x) in row.iter().enumerate() {
            data.push(as_f64(x, &format!("{name}[{r}][{c}]"))?);
        }
    }
    Array2::from_shape_vec((rows.len(), width.unwrap_or(0)), data)
        .map_err(|e| schema(name, e.to_string()))
}

pub fn parse_cohort(text: &str) -> Result<Cohort> {
    let root: Value = serde_json::from_str(text).map_err(|e| schema("<document>", e.to_string()))?;
    let obj = root
        .as_object()
        .ok_or_else(|| schema("<document>", "expected a JSON object"))?;
    let version = field(obj, "schema", "")?
        .as_u64()
        .ok_or_else(|| schema("schema", "expected an integer"))?;
    if version != COHORT_SCHEMA_VERSION {
        return Err(schema("schema", format!("unsupported version {version}")));
    }
    let n_bins = match field(obj, "n_bins", "")? {
        Value::Null => None,
        v => Some(
            v.as_u64()
                .filter(|&n| n >= 1)
                .ok_or_else(|| schema("n_bins", "expected a positive integer or null"))? as usize,
        ),
    };
    let bin_edges = field(obj, "bin_edges", "")?
        .as_array()
        .ok_or_else(|| schema("bin_edges", "expected an array"))?
        .iter()
        .enumerate()
        .map(|(i, v)| as_f64(v, &format!("bin_edges[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    if bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(schema("bin_edges", "edges must be strictly increasing"));
    }
    let raw_patients = field(obj, "patients", "")?
        .as_array()
        .ok_or_else(|| schema("patients", "expected an array"))?;

    let mut patients = Vec::with_capacity(raw_patients.len());
    for (i, p) in raw_patients.iter().enumerate() {
        let ctx = format!("patients[{i}].");
        let p = p
            .as_object()
            .ok_or_else(|| schema(format!("patients[{i}]"), "expected an object"))?;
        let id = field(p, "id", &ctx)?
            .as_str()
            .ok_or_else(|| schema(format!("{ctx}id"), "expected a string"))?
            .to_string();
        let time = as_f64(field(p, "time", &ctx)?, &format!("{ctx}time"))?;
        if !(time > 0.0) {
            return Err(schema(format!("{ctx}time"), "time must be positive"));
        }
        let event = match field(p, "event", &ctx)? {
            Value::Bool(b) => *b,
            v => match v.as_u64() {
                Some(0) => false,
                Some(1) => true,
                _ => return Err(schema(format!("{ctx}event"), "expected 0 or 1")),
            },
        };
        let bin = match field(p, "bin", &ctx)? {
            Value::Null => None,
            v => Some(v.as_u64().ok_or_else(|| schema(format!("{ctx}bin"), "expected an integer"))? as usize),
        };
        if let (Some(b), Some(n)) = (bin, n_bins) {
            if b < 1 || b > n {
                return Err(schema(format!("{ctx}bin"), format!("bin {b} outside [1, {n}]")));
            }
        }
        let tokens_m1 = parse_matrix(field(p, "m1_tokens", &ctx)?, &format!("{ctx}m1_tokens"))?;
        let tokens_m2 = parse_matrix(field(p, "m2_tokens", &ctx)?, &format!("{ctx}m2_tokens"))?;
        patients.push(PatientRecord {
            id,
            tokens_m1,
            tokens_m2,
            time,
            event,
            bin,
        });
    }
    Ok(Cohort {
        patients,
        n_bins,
        bin_edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn record(time: f64, event: bool) -> PatientRecord {
        PatientRecord {
            id: format!("t{time}"),
            tokens_m1: array![[0.0, 1.0]],
            tokens_m2: array![[1.0, 0.0], [0.5, 0.5]],
            time,
            event,
            bin: None,
        }
    }

    fn cohort(records: Vec<PatientRecord>) -> Cohort {
        Cohort {
            patients: records,
            ..Default::default()
        }
    }

    #[test]
    fn quartile_edges_by_hand() {
        let c = cohort((1..=4).map(|t| record(t as f64, true)).collect());
        let b = assign_time_bins(&c, 4).unwrap();
        assert_eq!(b.bin_edges, vec![1.75, 2.5, 3.25]);
        let bins: Vec<_> = b.patients.iter().map(|p| p.bin.unwrap()).collect();
        assert_eq!(bins, vec![1, 2, 3, 4]);
    }

    #[test]
    fn single_bin_has_no_edges() {
        let c = cohort(vec![record(3.0, true), record(1.0, false)]);
        let b = assign_time_bins(&c, 1).unwrap();
        assert!(b.bin_edges.is_empty());
        assert!(b.patients.iter().all(|p| p.bin == Some(1)));
    }

    #[test]
    fn late_censored_patient_lands_in_last_bin() {
        let mut rs: Vec<_> = (1..=4).map(|t| record(t as f64, true)).collect();
        rs.push(record(100.0, false));
        let b = assign_time_bins(&cohort(rs), 4).unwrap();
        assert_eq!(b.patients[4].bin, Some(4));
    }

    #[test]
    fn too_few_events_is_a_data_error() {
        let c = cohort(vec![record(1.0, true), record(2.0, false), record(3.0, true)]);
        assert!(matches!(assign_time_bins(&c, 4), Err(Error::Data(_))));
        assert!(matches!(assign_time_bins(&Cohort::default(), 2), Err(Error::Data(_))));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = SynthConfig {
            n_patients: 20,
            ..Default::default()
        };
        let a = generate_synthetic_cohort(&cfg).unwrap();
        let b = generate_synthetic_cohort(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_cohort(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn infinite_horizon_means_no_censoring() {
        let cfg = SynthConfig {
            n_patients: 300,
            censor_horizon: f64::INFINITY,
            ..Default::default()
        };
        let c = generate_synthetic_cohort(&cfg).unwrap();
        assert!(c.patients.iter().all(|p| p.event && p.time > 0.0));
    }

    #[test]
    fn invalid_dimensions_are_rejected() {
        for cfg in [
            SynthConfig { n_patients: 0, ..Default::default() },
            SynthConfig { token_dim: 0, ..Default::default() },
            SynthConfig { noise_sigma: -1.0, ..Default::default() },
        ] {
            assert!(matches!(generate_synthetic_cohort(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn json_roundtrip_three_patients() {
        let c = cohort(vec![record(0.1 + 0.2, true), record(1.0 / 3.0, false), record(7.0, true)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        save_cohort(&c, &path).unwrap();
        assert_eq!(load_cohort(&path).unwrap(), c);
    }

    #[test]
    fn missing_event_field_is_named() {
        let text = r#"{"schema":1,"n_bins":null,"bin_edges":[],"patients":[
            {"id":"a","time":1.0,"bin":null,"m1_tokens":[[1.0]],"m2_tokens":[[1.0]]}]}"#;
        match parse_cohort(text) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "patients[0].event"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn empty_cohort_loads_then_binning_fails() {
        let text = r#"{"schema":1,"n_bins":null,"bin_edges":[],"patients":[]}"#;
        let c = parse_cohort(text).unwrap();
        assert!(c.is_empty());
        assert!(assign_time_bins(&c, 4).is_err());
    }
}
