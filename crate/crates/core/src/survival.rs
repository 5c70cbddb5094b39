//! Discrete-time survival likelihood and risk scores.

use crate::error::{Error, Result};

/// Arguments of `ln` are floored here before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurvivalLabel {
    /// 1-based time bin.
    pub bin: usize,
    pub censored: bool,
}

/// `Π_{j ≤ k} (1 - h_j)`; `k = 0` is the empty product.
pub fn survival_function(hazards: &[f64], k: usize) -> Result<f64> {
    if k > hazards.len() {
        return Err(Error::Argument(format!("k = {k} exceeds {} bins", hazards.len())));
    }
    Ok(hazards[..k].iter().map(|h| 1.0 - h).product())
}

/// Result of one likelihood evaluation with its hazard gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct NllEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Number of log arguments that hit [`LOG_FLOOR`].
    pub clamped: usize,
}

fn floored_log(x: f64, clamped: &mut usize) -> (f64, bool) {
    if x < LOG_FLOOR {
        *clamped += 1;
        (LOG_FLOOR.ln(), true)
    } else {
        (x.ln(), false)
    }
}

/// Censored negative log-likelihood with `dL/dh`.
///
/// Uncensored at bin `n`: `-ln h_n - ln S(n-1)`. Censored: `-ln S(n)`. The
/// survival logs are accumulated per factor, which equals the log of the
/// product unless a factor hits the floor.
pub fn nll_with_grad(hazards: &[f64], label: SurvivalLabel) -> Result<NllEval> {
    let n = label.bin;
    if n == 0 || n > hazards.len() {
        return Err(Error::Argument(format!("bin {n} outside [1, {}]", hazards.len())));
    }
    let mut clamped = 0;
    let mut grad = vec![0.0; hazards.len()];
    let mut loss = 0.0;
    let survive_to = if label.censored { n } else { n - 1 };
    for j in 0..survive_to {
        let (l, hit) = floored_log(1.0 - hazards[j], &mut clamped);
        loss -= l;
        if !hit {
            grad[j] = 1.0 / (1.0 - hazards[j]);
        }
    }
    if !label.censored {
        let (l, hit) = floored_log(hazards[n - 1], &mut clamped);
        loss -= l;
        if !hit {
            grad[n - 1] = -1.0 / hazards[n - 1];
        }
    }
    Ok(NllEval { loss, grad, clamped })
}

pub fn nll_loss(hazards: &[f64], label: SurvivalLabel) -> Result<f64> {
    nll_with_grad(hazards, label).map(|e| e.loss)
}

pub fn total_loss(surv: f64, dis: f64, alpha: f64) -> f64 {
    surv + alpha * dis
}

/// Negative expected number of survived bins, `-Σ_k S(k)`; larger means riskier.
pub fn risk_score(hazards: &[f64]) -> f64 {
    let mut s = 1.0;
    let mut total = 0.0;
    for h in hazards {
        s *= 1.0 - h;
        total += s;
    }
    -total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const H: [f64; 2] = [0.2, 0.4];

    #[test]
    fn survival_fixtures() {
        assert_eq!(survival_function(&H, 0).unwrap(), 1.0);
        assert!((survival_function(&H, 2).unwrap() - 0.48).abs() < 1e-15);
        assert!(survival_function(&H, 3).is_err());
    }

    #[test]
    fn likelihood_fixtures() {
        let ev = nll_loss(&H, SurvivalLabel { bin: 2, censored: false }).unwrap();
        assert!((ev - (-(0.4f64.ln()) - 0.8f64.ln())).abs() < 1e-15);
        assert!((ev - 1.1394).abs() < 1e-4);
        let ce = nll_loss(&H, SurvivalLabel { bin: 2, censored: true }).unwrap();
        assert!((ce + 0.48f64.ln()).abs() < 1e-15);
        let first = nll_loss(&H, SurvivalLabel { bin: 1, censored: false }).unwrap();
        assert_eq!(first, -(0.2f64.ln()));
        assert!(nll_loss(&H, SurvivalLabel { bin: 0, censored: false }).is_err());
    }

    #[test]
    fn floor_is_counted() {
        let e = nll_with_grad(&[1.0, 0.0], SurvivalLabel { bin: 2, censored: false }).unwrap();
        assert_eq!(e.clamped, 2);
        assert!((e.loss + 2.0 * LOG_FLOOR.ln()).abs() < 1e-9);
        assert_eq!(e.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn total_loss_is_linear_in_alpha() {
        assert_eq!(total_loss(1.0, 0.5, 0.0), 1.0);
        assert_eq!(total_loss(1.0, 0.5, 1.0), 1.5);
        let (a, b) = (total_loss(0.7, 0.3, 0.25), total_loss(0.7, 0.3, 0.75));
        assert!((0.5 * (a + b) - total_loss(0.7, 0.3, 0.5)).abs() < 1e-15);
    }

    #[test]
    fn risk_fixtures() {
        assert!((risk_score(&H) + 1.28).abs() < 1e-15);
        assert!((risk_score(&[1e-15; 4]) + 4.0).abs() < 1e-12);
    }

    fn hazards(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..0.99, n)
    }

    proptest! {
        #[test]
        fn survival_is_nonincreasing(h in hazards(6)) {
            for k in 0..6 {
                prop_assert!(survival_function(&h, k + 1).unwrap() <= survival_function(&h, k).unwrap());
            }
        }

        #[test]
        fn nll_is_nonnegative_with_correct_gradient(h in hazards(5), bin in 1usize..=5, censored: bool) {
            let label = SurvivalLabel { bin, censored };
            let e = nll_with_grad(&h, label).unwrap();
            prop_assert!(e.loss >= 0.0);
            let step = 1e-6;
            for j in 0..5 {
                let mut up = h.clone();
                up[j] += step;
                let mut dn = h.clone();
                dn[j] -= step;
                let fd = (nll_loss(&up, label).unwrap() - nll_loss(&dn, label).unwrap()) / (2.0 * step);
                let denom = fd.abs().max(e.grad[j].abs()).max(1e-8);
                prop_assert!((fd - e.grad[j]).abs() / denom < 1e-4);
            }
        }

        #[test]
        fn dominating_hazards_are_riskier(h in hazards(4), bump in 0.001f64..0.5, idx in 0usize..4) {
            let mut hi = h.clone();
            hi[idx] = (hi[idx] + bump).min(0.999);
            prop_assume!(hi[idx] > h[idx]);
            prop_assert!(risk_score(&hi) > risk_score(&h));
        }
    }
}
