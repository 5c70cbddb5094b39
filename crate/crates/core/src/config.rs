use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoupling::DistanceMetric;
use crate::error::{Error, Result};
use crate::reorganize::SegmentSet;

/// Component removals for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// Drop the explored feature; bundles carry three features.
    NoExplore,
    /// Replace cross-attention by the mean of the two embeddings.
    NoRca,
    /// Fixed plain concatenation instead of random segment interleaving.
    NoRfr,
    /// Single affine hazard head on the fused vector.
    NoMoe,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoExplore,
        Ablation::NoRca,
        Ablation::NoRfr,
        Ablation::NoMoe,
    ];

    /// Row label used in summaries.
    pub fn label(&self) -> &'static str {
        match self {
            Ablation::Full => "Full model",
            Ablation::NoExplore => "W/o V_explore",
            Ablation::NoRca => "W/o RCA",
            Ablation::NoRfr => "W/o RFR",
            Ablation::NoMoe => "W/o MoE",
        }
    }

    pub fn arity(&self) -> usize {
        if *self == Ablation::NoExplore {
            3
        } else {
            4
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoExplore => "no-explore",
            Ablation::NoRca => "no-rca",
            Ablation::NoRfr => "no-rfr",
            Ablation::NoMoe => "no-moe",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "full" | "none" => Ok(Ablation::Full),
            "no-explore" => Ok(Ablation::NoExplore),
            "no-rca" => Ok(Ablation::NoRca),
            "no-rfr" => Ok(Ablation::NoRfr),
            "no-moe" => Ok(Ablation::NoMoe),
            other => Err(Error::config(format!("unknown ablation variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Token feature width `C0` of both modalities.
    pub token_dim: usize,
    pub c1: usize,
    pub c2: usize,
    pub n_bins: usize,
    pub n_experts: usize,
    pub segments: Vec<usize>,
    /// Segment length used outside training; defaults to the largest in `segments`.
    pub eval_segment: Option<usize>,
    pub alpha: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(with = "metric_serde")]
    pub metric: DistanceMetric,
    pub ablation: Ablation,
    /// Scale cross-attention logits by `1/sqrt(C2)`.
    pub rca_scaled: bool,
    /// Optional cap on the subtracted specific-feature distance.
    pub specific_gap_cap: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            token_dim: 16,
            c1: 256,
            c2: 128,
            n_bins: 4,
            n_experts: 4,
            segments: vec![2, 8, 16, 32, 64],
            eval_segment: None,
            alpha: 1.0,
            learning_rate: 5e-4,
            weight_decay: 1e-5,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            metric: DistanceMetric::Mse,
            ablation: Ablation::Full,
            rca_scaled: false,
            specific_gap_cap: None,
        }
    }
}

mod metric_serde {
    use super::DistanceMetric;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DistanceMetric, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&m.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DistanceMetric, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl TrainConfig {
    /// Small configuration used by gradient checks.
    pub fn small() -> Self {
        Self {
            token_dim: 4,
            c1: 8,
            c2: 8,
            segments: vec![2, 4],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("token_dim", self.token_dim),
            ("c1", self.c1),
            ("c2", self.c2),
            ("n_bins", self.n_bins),
            ("n_experts", self.n_experts),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        self.segment_set()?;
        if let Some(s) = self.eval_segment {
            if s == 0 || !self.c2.is_multiple_of(s) {
                return Err(Error::config(format!("eval segment {s} does not divide c2 = {}", self.c2)));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("alpha must be nonnegative"));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning rate and weight decay must be nonnegative"));
        }
        Ok(())
    }

    pub fn segment_set(&self) -> Result<SegmentSet> {
        SegmentSet::new(self.segments.iter().copied(), self.c2)
    }

    /// Number of decoupled features feeding the fusion stage.
    pub fn arity(&self) -> usize {
        self.ablation.arity()
    }

    pub fn fused_dim(&self) -> usize {
        self.arity() * self.c2
    }

    pub fn eval_segment_length(&self) -> Result<usize> {
        if self.ablation == Ablation::NoRfr {
            return Ok(self.c2);
        }
        match self.eval_segment {
            Some(s) => Ok(s),
            None => Ok(self.segment_set()?.max()),
        }
    }
}
