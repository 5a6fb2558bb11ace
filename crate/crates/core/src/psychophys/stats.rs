//! Exact binomial and Wilcoxon signed-rank tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::{Error, Result};

/// Relative slack when collecting outcomes "as or less likely" than the
/// observed one, so ties in probability survive rounding.
const TIE_SLACK: f64 = 1e-7;

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn binom_pmf(k: u64, n: u64, p: f64) -> f64 {
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    (ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
}

/// Exact two-sided binomial test: total probability of all outcomes no more
/// likely than `successes` under `p0`.
pub fn binomial_test(successes: u64, n: u64, p0: f64) -> Result<f64> {
    if successes > n {
        return Err(Error::invalid("successes", format!("{successes} exceeds n = {n}")));
    }
    if !(0.0..=1.0).contains(&p0) {
        return Err(Error::invalid("p0", "must lie in [0, 1]"));
    }
    let observed = binom_pmf(successes, n, p0);
    let cutoff = observed * (1.0 + TIE_SLACK);
    let p: f64 = (0..=n).map(|k| binom_pmf(k, n, p0)).filter(|&q| q <= cutoff).sum();
    Ok(p.min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Sum of the ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub method: WilcoxonMethod,
}

/// Largest sample handled with the exact permutation distribution.
pub const EXACT_MAX_N: usize = 20;

/// Average ranks of `|d|`, ties sharing the mean of their positions.
fn average_ranks(abs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..abs.len()).collect();
    idx.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0.0; abs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && abs[idx[j + 1]] == abs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided signed-rank test on paired samples `(x, y)`, testing the
/// differences `x − y` for symmetry about zero.
///
/// Zero differences are dropped. Up to [`EXACT_MAX_N`] non-zero differences
/// the p-value comes from the exact distribution of the statistic over all
/// sign assignments of the observed (possibly tied) ranks. Beyond that a
/// normal approximation with tie correction and continuity correction is
/// used.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<Wilcoxon> {
    let d: Vec<f64> = pairs.iter().map(|(x, y)| x - y).collect();
    signed_rank(&d)
}

/// One-sample form: tests `xs` for symmetry about `mu`.
pub fn wilcoxon_one_sample(xs: &[f64], mu: f64) -> Result<Wilcoxon> {
    let d: Vec<f64> = xs.iter().map(|x| x - mu).collect();
    signed_rank(&d)
}

fn signed_rank(d: &[f64]) -> Result<Wilcoxon> {
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("pairs", "differences must be finite"));
    }
    let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();

    if n <= EXACT_MAX_N {
        // Ranks are multiples of one half; count sign assignments by doubled
        // rank sum.
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0f64; total + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let w2 = (w_plus * 2.0).round() as usize;
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
        let p = (2.0 * lower.min(upper)).min(1.0);
        return Ok(Wilcoxon {
            statistic: w_plus,
            p_value: p,
            n,
            method: WilcoxonMethod::Exact,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let diff = w_plus - mean;
    let z = if var > 0.0 { (diff.abs() - 0.5).max(0.0) / var.sqrt() } else { 0.0 };
    let p = (2.0 * (1.0 - Normal::standard().cdf(z))).min(1.0);
    Ok(Wilcoxon {
        statistic: w_plus,
        p_value: p,
        n,
        method: WilcoxonMethod::Normal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Tail summation with the pmf built by repeated multiplication.
    fn binomial_oracle(k: u64, n: u64, p: f64) -> f64 {
        // Recurse from the likelier end so the seed term stays out of the subnormal range.
        let (q, flip) = if p > 0.5 { (1.0 - p, true) } else { (p, false) };
        let mut pmf = vec![0.0; n as usize + 1];
        pmf[0] = (1.0 - q).powi(n as i32);
        for j in 1..=n as usize {
            pmf[j] = pmf[j - 1] * (n as f64 - j as f64 + 1.0) / j as f64 * q / (1.0 - q);
        }
        if flip {
            pmf.reverse();
        }
        let obs = pmf[k as usize];
        pmf.iter().filter(|&&q| q <= obs * (1.0 + 1e-7)).sum::<f64>().min(1.0)
    }

    /// Brute force over all 2^n sign assignments of the observed ranks.
    fn wilcoxon_oracle(d: &[f64]) -> f64 {
        let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
        let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
        let ranks = average_ranks(&abs);
        let w: f64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let n = nz.len();
        let (mut lo, mut hi) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s <= w + 1e-9 {
                lo += 1;
            }
            if s >= w - 1e-9 {
                hi += 1;
            }
        }
        let all = (1u64 << n) as f64;
        (2.0 * (lo.min(hi) as f64) / all).min(1.0)
    }

    #[test]
    fn binomial_examples() {
        assert!((binomial_test(5, 10, 0.5).unwrap() - 1.0).abs() < 1e-12);
        assert!((binomial_test(10, 10, 0.5).unwrap() - 2.0 * 0.5f64.powi(10)).abs() < 1e-12);
        assert!((binomial_test(84, 100, 0.5).unwrap() - binomial_oracle(84, 100, 0.5)).abs() < 1e-10);
        assert!(binomial_test(11, 10, 0.5).is_err());
        assert_eq!(binomial_test(0, 0, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn wilcoxon_examples() {
        let mirrored = [(1.0, 0.0), (0.0, 1.0), (2.0, 0.0), (0.0, 2.0), (3.0, 0.0), (0.0, 3.0)];
        assert!((wilcoxon_signed_rank(&mirrored).unwrap().p_value - 1.0).abs() < 1e-12);
        let pos: Vec<(f64, f64)> = (1..=8).map(|i| (i as f64 * 1.5, 0.0)).collect();
        let w = wilcoxon_signed_rank(&pos).unwrap();
        assert_eq!(w.statistic, 36.0);
        assert!((w.p_value - 2.0 / 256.0).abs() < 1e-12);
        assert_eq!(w.method, WilcoxonMethod::Exact);
        assert!(matches!(wilcoxon_signed_rank(&[(1.0, 1.0), (2.0, 2.0)]), Err(Error::AllZeroDifferences)));
    }

    #[test]
    fn ties_and_zeros() {
        let d = [0.0, 1.0, -1.0, 1.0, 2.0, 2.0, -3.0, 4.0];
        let w = wilcoxon_one_sample(&d, 0.0).unwrap();
        assert_eq!(w.n, 7);
        assert!((w.p_value - wilcoxon_oracle(&d)).abs() < 1e-12);
    }

    #[test]
    fn large_sample_uses_normal() {
        let xs: Vec<f64> = (0..30).map(|i| (i % 7) as f64 - 1.5).collect();
        let w = wilcoxon_one_sample(&xs, 0.0).unwrap();
        assert_eq!(w.method, WilcoxonMethod::Normal);
        assert!(w.p_value > 0.0 && w.p_value < 1.0);
        // Likert-like ratings well above neutral are significant.
        let ratings = [6.0, 6.0, 5.0, 7.0, 6.0, 5.0, 6.0, 7.0, 5.0, 6.0, 6.0, 5.0];
        assert!(wilcoxon_one_sample(&ratings, 4.0).unwrap().p_value < 0.001);
    }

    proptest! {
        #[test]
        fn binomial_matches_tail_summation(n in 1u64..300, frac in 0.0f64..=1.0, p0 in 0.05f64..0.95) {
            let k = (frac * n as f64).round() as u64;
            let a = binomial_test(k, n, p0).unwrap();
            let b = binomial_oracle(k, n, p0);
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }

        #[test]
        fn wilcoxon_matches_enumeration(d in proptest::collection::vec(-5i32..=5, 1..=12)) {
            let d: Vec<f64> = d.into_iter().map(f64::from).collect();
            prop_assume!(d.iter().any(|&v| v != 0.0));
            let w = wilcoxon_one_sample(&d, 0.0).unwrap();
            prop_assert!((w.p_value - wilcoxon_oracle(&d)).abs() < 1e-12);
        }
    }
}
