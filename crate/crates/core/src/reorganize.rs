//! Random feature reorganization.
//!
//! Every decoupled feature is cut into `C2 / s` segments of length `s`; the
//! `l`-th segments of all features are concatenated, and those groups are laid
//! out in segment order. Element `j` of feature `o` therefore lands at
//! `(j / s)·F·s + o·s + j % s`.

use rand::Rng;

use crate::decoupling::DecoupledBundle;
use crate::error::{Error, Result};

/// Candidate segment lengths, each dividing the feature width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSet {
    values: Vec<usize>,
    width: usize,
}

impl SegmentSet {
    pub fn new(values: impl IntoIterator<Item = usize>, width: usize) -> Result<Self> {
        let mut values: Vec<usize> = values.into_iter().collect();
        values.sort_unstable();
        values.dedup();
        if values.is_empty() {
            return Err(Error::config("segment set is empty"));
        }
        if let Some(bad) = values.iter().find(|&&s| s == 0 || !width.is_multiple_of(s)) {
            return Err(Error::config(format!("segment length {bad} does not divide feature width {width}")));
        }
        Ok(Self { values, width })
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max(&self) -> usize {
        *self.values.last().expect("nonempty by construction")
    }
}

/// Uniform draw from the segment set.
pub fn sample_segment_length<R: Rng + ?Sized>(set: &SegmentSet, rng: &mut R) -> usize {
    set.values[rng.random_range(0..set.values.len())]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReorgPlan {
    pub segment: usize,
    pub width: usize,
    pub arity: usize,
    /// `dest[k]` is the output position of concatenated input index `k`.
    dest: Vec<usize>,
}

impl ReorgPlan {
    pub fn len(&self) -> usize {
        self.dest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dest.is_empty()
    }

    pub fn destinations(&self) -> &[usize] {
        &self.dest
    }

    /// Scatter `input` (the `[f1 | f2 | ...]` concatenation) into `out`.
    pub fn apply_into(&self, input: &[f64], out: &mut [f64]) {
        for (&d, &x) in self.dest.iter().zip(input) {
            out[d] = x;
        }
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; input.len()];
        self.apply_into(input, &mut out);
        out
    }

    /// Inverse gather; also the backward pass of [`ReorgPlan::apply`].
    pub fn invert_into(&self, output: &[f64], input: &mut [f64]) {
        for (x, &d) in input.iter_mut().zip(&self.dest) {
            *x = output[d];
        }
    }

    pub fn invert(&self, output: &[f64]) -> Vec<f64> {
        let mut input = vec![0.0; output.len()];
        self.invert_into(output, &mut input);
        input
    }
}

pub fn build_plan(width: usize, segment: usize, arity: usize) -> Result<ReorgPlan> {
    if segment == 0 || !width.is_multiple_of(segment) {
        return Err(Error::config(format!("segment length {segment} does not divide feature width {width}")));
    }
    if arity == 0 {
        return Err(Error::config("reorganization needs at least one feature"));
    }
    let mut dest = Vec::with_capacity(width * arity);
    for o in 0..arity {
        for j in 0..width {
            dest.push((j / segment) * arity * segment + o * segment + j % segment);
        }
    }
    Ok(ReorgPlan {
        segment,
        width,
        arity,
        dest,
    })
}

pub fn reorganize(bundle: &DecoupledBundle, plan: &ReorgPlan) -> Result<Vec<f64>> {
    if bundle.arity() != plan.arity || bundle.dim() != plan.width {
        return Err(Error::dim(format!(
            "bundle has {} features of width {}, plan expects {} of width {}",
            bundle.arity(),
            bundle.dim(),
            plan.arity,
            plan.width
        )));
    }
    Ok(plan.apply(&bundle.concat()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labelled_bundle(width: usize, arity: usize) -> DecoupledBundle {
        // feature o, element j -> 10 (o + 1) + (j + 1)
        let f = |o: usize| Array1::from_iter((0..width).map(|j| (10 * (o + 1) + j + 1) as f64));
        DecoupledBundle {
            sp1: f(0),
            sp2: f(1),
            share: f(2),
            explore: (arity == 4).then(|| f(3)),
        }
    }

    #[test]
    fn interleave_width_four_segment_two() {
        let plan = build_plan(4, 2, 4).unwrap();
        let out = reorganize(&labelled_bundle(4, 4), &plan).unwrap();
        let expected = [11, 12, 21, 22, 31, 32, 41, 42, 13, 14, 23, 24, 33, 34, 43, 44];
        assert_eq!(out, expected.iter().map(|&x| x as f64).collect::<Vec<_>>());
    }

    #[test]
    fn interleave_width_two_segment_one() {
        let plan = build_plan(2, 1, 4).unwrap();
        let out = reorganize(&labelled_bundle(2, 4), &plan).unwrap();
        assert_eq!(out, vec![11.0, 21.0, 31.0, 41.0, 12.0, 22.0, 32.0, 42.0]);
    }

    #[test]
    fn full_segment_is_concatenation() {
        let b = labelled_bundle(8, 4);
        let plan = build_plan(8, 8, 4).unwrap();
        assert_eq!(reorganize(&b, &plan).unwrap(), b.concat());
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        let plan = build_plan(4, 2, 4).unwrap();
        assert!(matches!(reorganize(&labelled_bundle(4, 3), &plan), Err(Error::Dimension(_))));
        assert!(build_plan(128, 3, 4).is_err());
    }

    #[test]
    fn segment_set_validation() {
        assert!(SegmentSet::new([2, 8, 16, 32, 64], 128).is_ok());
        assert!(SegmentSet::new([3], 128).is_err());
        assert!(SegmentSet::new([], 128).is_err());
    }

    #[test]
    fn singleton_set_always_draws_its_value() {
        let set = SegmentSet::new([8], 128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_segment_length(&set, &mut rng) == 8));
    }

    #[test]
    fn draws_are_uniform_within_three_sigma() {
        let set = SegmentSet::new([2, 8, 16, 32, 64], 128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..n {
            *counts.entry(sample_segment_length(&set, &mut rng)).or_insert(0usize) += 1;
        }
        let p = 0.2;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (&s, &c) in &counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "segment {s}: {c}");
        }
        assert_eq!(counts.len(), 5);
    }
}
