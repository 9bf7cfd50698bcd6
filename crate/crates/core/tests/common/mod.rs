//! Shared oracles for the integration suites. Everything here is an
//! independent computation path: exact rational arithmetic for binomial
//! tails, and plain two-sample statistics.

#![allow(dead_code)]

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};

fn big_binomial(n: usize, k: usize) -> BigInt {
    let mut num = BigInt::one();
    let mut den = BigInt::one();
    let k = k.min(n - k);
    for i in 1..=k {
        num *= BigInt::from(n - k + i);
        den *= BigInt::from(i);
    }
    num / den
}

/// Exponent-by-squaring on numerator and denominator separately; powers of
/// coprime integers stay coprime, so no reduction pass is needed.
fn pow_rational(base: &BigRational, exp: usize) -> BigRational {
    BigRational::new_raw(
        num::traits::Pow::pow(base.numer(), exp),
        num::traits::Pow::pow(base.denom(), exp),
    )
}

/// Convert a rational to f64 through a controlled 64-bit quotient, so huge
/// numerators and denominators never overflow the conversion.
fn rational_to_f64(r: &BigRational) -> f64 {
    if r.is_zero() {
        return 0.0;
    }
    let negative = r.is_negative();
    let num = r.numer().abs();
    let den = r.denom().abs();
    let shift: i64 = 64 - (num.bits() as i64 - den.bits() as i64);
    let quotient = if shift >= 0 {
        (num << shift as u64) / den
    } else {
        num / (den << (-shift) as u64)
    };
    let q = quotient.to_f64().expect("quotient fits after shifting");
    let v = q * (2.0f64).powi(-shift as i32);
    if negative {
        -v
    } else {
        v
    }
}

/// Exact-rational upper tail `P(X >= k0)` for `X ~ Binomial(n, q)`, with
/// `q` taken as the exact binary value of the f64 argument.
pub fn binom_upper_tail_exact(n: usize, k0: usize, q: f64) -> f64 {
    if k0 == 0 {
        return 1.0;
    }
    if k0 > n {
        return 0.0;
    }
    let q = BigRational::from_float(q).expect("finite probability");
    let one = BigRational::one();
    let p1 = &one - &q;
    let mut sum = BigRational::zero();
    for k in k0..=n {
        let term = BigRational::from_integer(big_binomial(n, k))
            * pow_rational(&q, k)
            * pow_rational(&p1, n - k);
        sum += term;
    }
    rational_to_f64(&sum)
}

/// Exact-rational `1 - (1 - x)^m` with `x` taken as its exact binary value.
pub fn pr_at_least_one_exact(x: f64, m: usize) -> f64 {
    let x = BigRational::from_float(x).expect("finite probability");
    let one = BigRational::one();
    let complement = pow_rational(&(&one - &x), m);
    rational_to_f64(&(&one - &complement))
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        let fa = i as f64 / a.len() as f64;
        let fb = j as f64 / b.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

/// Relative disagreement with a floor for near-zero references.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}
