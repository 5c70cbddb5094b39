//! Survival statistics: Harrell's C-index, Kaplan–Meier, log-rank and median
//! risk stratification, plus the CSV layouts they are exported in.

use std::fmt::Write as _;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskRecord {
    pub risk: f64,
    pub time: f64,
    pub event: bool,
}

/// Integer pair counts behind a C-index value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConcordanceCounts {
    pub concordant: u64,
    pub tied_risk: u64,
    pub comparable: u64,
}

impl ConcordanceCounts {
    pub fn index(&self) -> Result<f64> {
        if self.comparable == 0 {
            return Err(Error::UndefinedMetric("no comparable pairs for the C-index".into()));
        }
        Ok((self.concordant as f64 + 0.5 * self.tied_risk as f64) / self.comparable as f64)
    }
}

/// Fenwick tree over risk ranks.
struct RankCounter {
    tree: Vec<u64>,
}

impl RankCounter {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Pair counts in `O(n log n)`.
///
/// A pair `(i, j)` is comparable when `t_i < t_j` and `i` had the event; pairs
/// with equal times are never comparable.
pub fn concordance_counts(records: &[RiskRecord]) -> ConcordanceCounts {
    let n = records.len();
    let mut risks: Vec<f64> = records.iter().map(|r| r.risk).collect();
    risks.sort_by(f64::total_cmp);
    risks.dedup();
    let rank = |r: f64| risks.partition_point(|&x| x < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));

    let mut counts = ConcordanceCounts::default();
    let mut later = RankCounter::new(risks.len());
    let mut inserted = 0u64;
    let mut start = 0;
    while start < n {
        let t = records[order[start]].time;
        let mut end = start;
        while end < n && records[order[end]].time == t {
            end += 1;
        }
        for &i in &order[start..end] {
            if records[i].event {
                let k = rank(records[i].risk);
                let lower = later.below(k);
                let not_higher = later.below(k + 1);
                counts.comparable += inserted;
                counts.concordant += lower;
                counts.tied_risk += not_higher - lower;
            }
        }
        for &i in &order[start..end] {
            later.add(rank(records[i].risk));
            inserted += 1;
        }
        start = end;
    }
    counts
}

pub fn concordance_index(records: &[RiskRecord]) -> Result<f64> {
    if records.len() < 2 {
        return Err(Error::UndefinedMetric("C-index needs at least two records".into()));
    }
    concordance_counts(records).index()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KmCurve {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// Step-function value at `t` (right-continuous).
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

/// Product-limit estimator.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    if times.is_empty() || times.len() != events.len() {
        return Err(Error::dim("Kaplan-Meier needs equal-length nonempty times and events"));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut curve = KmCurve::default();
    let mut at_risk = times.len();
    let mut s = 1.0;
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut deaths = 0;
        while j < order.len() && times[order[j]] == t {
            deaths += usize::from(events[order[j]]);
            j += 1;
        }
        if deaths > 0 {
            s *= (at_risk - deaths) as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(deaths);
        }
        at_risk -= j - i;
        i = j;
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRank {
    pub chi2: f64,
    pub p: f64,
}

/// Two-group log-rank test with the hypergeometric variance.
pub fn logrank_test(group_a: &[RiskRecord], group_b: &[RiskRecord]) -> Result<LogRank> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::UndefinedMetric("log-rank needs two nonempty groups".into()));
    }
    let mut event_times: Vec<f64> = group_a
        .iter()
        .chain(group_b)
        .filter(|r| r.event)
        .map(|r| r.time)
        .collect();
    if event_times.is_empty() {
        return Err(Error::UndefinedMetric("log-rank needs at least one event".into()));
    }
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();

    let mut observed = 0.0;
    let mut expected = 0.0;
    let mut variance = 0.0;
    for &t in &event_times {
        let n_a = group_a.iter().filter(|r| r.time >= t).count() as f64;
        let n_b = group_b.iter().filter(|r| r.time >= t).count() as f64;
        let d_a = group_a.iter().filter(|r| r.event && r.time == t).count() as f64;
        let d_b = group_b.iter().filter(|r| r.event && r.time == t).count() as f64;
        let n = n_a + n_b;
        let d = d_a + d_b;
        observed += d_a;
        expected += d * n_a / n;
        if n > 1.0 {
            variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
        }
    }
    let diff = observed - expected;
    if variance <= 0.0 {
        if diff.abs() < 1e-12 {
            return Ok(LogRank { chi2: 0.0, p: 1.0 });
        }
        return Err(Error::UndefinedMetric("log-rank variance is zero".into()));
    }
    let chi2 = diff * diff / variance;
    Ok(LogRank {
        chi2,
        p: chi_square_sf(chi2, 1.0),
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

/// Splits records at the median risk: `(high, low)` with ties going low.
pub fn stratify_by_median(records: &[RiskRecord]) -> Result<(Vec<RiskRecord>, Vec<RiskRecord>)> {
    if records.len() < 2 {
        return Err(Error::Data("stratification needs at least two records".into()));
    }
    let m = median(&records.iter().map(|r| r.risk).collect::<Vec<_>>());
    let (high, low): (Vec<_>, Vec<_>) = records.iter().partition(|r| r.risk > m);
    if high.is_empty() || low.is_empty() {
        return Err(Error::Data("degenerate median split: all risks identical".into()));
    }
    Ok((high, low))
}

/// Chi-square survival function with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df).map_or(f64::NAN, |d| d.sf(x))
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub fold: String,
    pub c_index: Option<f64>,
    pub chi2: Option<f64>,
    pub p: Option<f64>,
    pub variant: String,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "fold,c_index,chi2,p,variant,seed";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x}"))
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.fold,
            opt(r.c_index),
            opt(r.chi2),
            opt(r.p),
            r.variant,
            r.seed
        );
    }
    out
}

/// `group,time,survival,at_risk` rows, starting each group at `(0, 1, n)`.
pub fn km_csv(curves: &[(&str, &KmCurve, usize)]) -> String {
    let mut out = String::from("group,time,survival,at_risk\n");
    for (name, curve, n) in curves {
        let _ = writeln!(out, "{name},0,1,{n}");
        for k in 0..curve.times.len() {
            let _ = writeln!(out, "{name},{},{},{}", curve.times[k], curve.survival[k], curve.at_risk[k]);
        }
    }
    out
}
