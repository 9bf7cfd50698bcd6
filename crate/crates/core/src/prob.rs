//! Closed-form detection probabilities and their numerically stable
//! evaluation.
//!
//! The three quantities: the chance the owner's extraction clears the
//! threshold given a per-position match ratio, the chance a single random
//! key clears it, and the chance that any key in a user population does.
//! At realistic parameters the single-key probability sits near 1e-9 and
//! then gets multiplied by populations of 1e5, so everything is evaluated
//! in log space; naive summation would lose every significant digit.

use crate::error::{Error, Result};
use crate::single::DetectionReport;

/// Parameters of the detection probability formulas.
#[derive(Debug, Clone, Copy)]
pub struct ProbParams {
    /// Number of watermark positions.
    pub l: usize,
    /// Detection threshold: success needs strictly more than `rho` matches.
    pub rho: usize,
    /// Per-position match ratio for the owner's key.
    pub p: f64,
    /// Per-position match probability for a random key.
    pub beta: f64,
    /// User population size.
    pub num_u: usize,
}

impl ProbParams {
    pub fn validate(&self) -> Result<()> {
        if self.rho > self.l {
            return Err(Error::InvalidArgument(format!(
                "rho={} exceeds l={}",
                self.rho, self.l
            )));
        }
        for (name, v) in [("p", self.p), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name}={v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Log of the binomial coefficient via compensated log summation.
fn ln_choose(n: usize, k: usize) -> f64 {
    debug_assert!(k <= n);
    let k = k.min(n - k);
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for i in 1..=k {
        let term = ((n - k + i) as f64).ln() - (i as f64).ln();
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

fn ln_pmf(n: usize, k: usize, ln_q: f64, ln_1mq: f64) -> f64 {
    ln_choose(n, k) + k as f64 * ln_q + (n - k) as f64 * ln_1mq
}

/// Upper tail `P(X >= k0)` for `X ~ Binomial(n, q)`, evaluated in log
/// space. The smaller of the two tails is summed directly and the other is
/// derived from it, keeping relative error near machine precision down to
/// magnitudes around 1e-15.
pub fn binom_upper_tail(n: usize, k0: usize, q: f64) -> f64 {
    assert!((0.0..=1.0).contains(&q), "q outside [0, 1]");
    assert!(k0 <= n + 1, "k0 beyond support");
    if k0 == 0 {
        return 1.0;
    }
    if k0 > n {
        return 0.0;
    }
    if q == 0.0 {
        return 0.0;
    }
    if q == 1.0 {
        return 1.0;
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let mean = n as f64 * q;
    if (k0 as f64) > mean {
        // Small upper tail: sum its terms from the smallest up.
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for k in (k0..=n).rev() {
            let term = ln_pmf(n, k, ln_q, ln_1mq).exp();
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        sum.min(1.0)
    } else {
        // Small lower tail: sum P(X < k0) and complement.
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for k in 0..k0 {
            let term = ln_pmf(n, k, ln_q, ln_1mq).exp();
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        (1.0 - sum).clamp(0.0, 1.0)
    }
}

/// Probability the owner's extraction succeeds: the watermark clears the
/// threshold when each position matches independently with ratio `p`.
pub fn pr_wm_success(pp: &ProbParams) -> Result<f64> {
    pp.validate()?;
    Ok(binom_upper_tail(pp.l, pp.rho, pp.p))
}

/// Probability a single random key clears the detection threshold.
pub fn pr_u_random(pp: &ProbParams) -> Result<f64> {
    pp.validate()?;
    Ok(binom_upper_tail(pp.l, pp.rho, pp.beta))
}

/// Probability that at least one of `num_u` random keys clears the
/// threshold. Stable for `pr_urandom` far below 1e-12.
pub fn pr_u_wrong(pr_urandom: f64, num_u: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&pr_urandom) {
        return Err(Error::InvalidArgument(format!(
            "pr_urandom={pr_urandom} outside [0, 1]"
        )));
    }
    if num_u == 0 {
        return Ok(0.0);
    }
    if pr_urandom == 1.0 {
        return Ok(1.0);
    }
    // 1 - (1 - x)^n = -expm1(n * ln(1 - x))
    Ok(-(num_u as f64 * (-pr_urandom).ln_1p()).exp_m1())
}

/// Literal per-position match ratio of a report.
pub fn estimate_p(report: &DetectionReport) -> Result<f64> {
    let l = report.per_position.len();
    if l == 0 {
        return Err(Error::InvalidArgument(
            "report has no positions to estimate from".into(),
        ));
    }
    Ok(report.detect_count as f64 / l as f64)
}
