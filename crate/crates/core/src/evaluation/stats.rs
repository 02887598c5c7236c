use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::model::{rng_stream, Stream};

/// Resamples drawn by the paired permutation test.
pub const PERMUTATION_RESAMPLES: usize = 10_000;

/// Seed of the permutation test's sign flips.
pub const PERMUTATION_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub alpha: f64,
    pub permutation_p: f64,
    pub wilcoxon_p: f64,
    pub ttest_p: f64,
    pub permutation_significant: bool,
    pub wilcoxon_significant: bool,
    pub ttest_significant: bool,
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Invalid("paired samples are empty".into()));
    }
    Ok(b.iter().zip(a).map(|(y, x)| y - x).collect())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Two-sided paired permutation test on the mean difference with random
/// sign flips; `p = (1 + #{|mean*| ≥ |mean|}) / (1 + resamples)`.
pub fn paired_permutation_test(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    let d = differences(a, b)?;
    if d.iter().all(|&x| x == 0.0) {
        return Ok(1.0);
    }
    let observed = mean(&d).abs();
    let tol = observed * 1e-12;
    let mut rng = rng_stream(seed, Stream::Baseline);
    let mut count = 0usize;
    for _ in 0..resamples {
        let s: f64 = d.iter().map(|&x| if rng.random::<bool>() { x } else { -x }).sum();
        if (s / d.len() as f64).abs() >= observed - tol {
            count += 1;
        }
    }
    Ok((1 + count) as f64 / (1 + resamples) as f64)
}

/// Average ranks (1-based) of `xs`, plus whether any value is tied.
fn average_ranks(xs: &[f64]) -> (Vec<f64>, bool) {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    let tied = ties.iter().any(|&t| t > 1);
    (ranks, tied)
}

/// Counts of every attainable `W+` for `n` untied ranks, `2^n` in total.
fn signed_rank_counts(n: usize) -> Vec<f64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0.0; max + 1];
    counts[0] = 1.0;
    for k in 1..=n {
        for s in (k..=max).rev() {
            counts[s] += counts[s - k];
        }
    }
    counts
}

/// Two-sided Wilcoxon signed-rank test; zero differences are dropped.
///
/// With at most 50 pairs and neither ties nor zeros the null distribution
/// is enumerated exactly. With ties or zeros, at most 13 pairs are resolved
/// by enumerating every sign assignment; larger samples use the normal
/// approximation with tie correction and no continuity correction.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    let d_all = differences(a, b)?;
    let zeros = d_all.iter().filter(|&&x| x == 0.0).count();
    let d: Vec<f64> = d_all.iter().copied().filter(|&x| x != 0.0).collect();
    if d.is_empty() {
        return Ok(1.0);
    }
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let (ranks, tied) = average_ranks(&abs);
    let r_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    if !(tied || zeros > 0) && d_all.len() <= 50 {
        let counts = signed_rank_counts(n);
        let total: f64 = counts.iter().sum();
        let k = r_plus.round() as usize;
        let cdf: f64 = counts[..=k].iter().sum::<f64>() / total;
        let sf: f64 = counts[k..].iter().sum::<f64>() / total;
        return Ok((2.0 * cdf.min(sf)).min(1.0));
    }
    if d_all.len() <= 13 {
        return Ok(enumerated_signed_rank(&d_all));
    }
    let nf = n as f64;
    let mn = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&x| x == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let se = ((nf * (nf + 1.0) * (2.0 * nf + 1.0) - tie_term / 2.0) / 24.0).sqrt();
    let z = (r_plus - mn) / se;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok((2.0 * normal.cdf(-z.abs())).min(1.0))
}

/// Exact two-sided p-value of `W+` over all `2^n` sign assignments of
/// the differences, zeros included but never contributing.
fn enumerated_signed_rank(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let abs: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
    let (ranks, _) = average_ranks(&abs);
    let stat = |signs: u32| -> f64 {
        ranks
            .iter()
            .enumerate()
            .filter(|(i, _)| (signs >> i) & 1 == 1)
            .map(|(_, r)| r)
            .sum()
    };
    let observed: u32 = nz
        .iter()
        .enumerate()
        .filter(|(_, x)| **x > 0.0)
        .map(|(i, _)| 1u32 << i)
        .sum();
    let obs = stat(observed);
    let tol = 1e-14 * obs.abs().max(1.0);
    // Zeros keep their sign under flipping, doubling every outcome equally.
    let total = 1u64 << nz.len();
    let (mut ge, mut le) = (0u64, 0u64);
    for s in 0..total as u32 {
        let v = stat(s);
        if v >= obs - tol {
            ge += 1;
        }
        if v <= obs + tol {
            le += 1;
        }
    }
    (2.0 * ge.min(le) as f64 / total as f64).min(1.0)
}

/// Two-sided paired t-test on `b − a`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = differences(a, b)?;
    if d.iter().all(|&x| x == 0.0) {
        return Ok(1.0);
    }
    let n = d.len() as f64;
    if d.len() < 2 {
        return Err(Error::Invalid("paired t-test needs at least two pairs".into()));
    }
    let m = mean(&d);
    let var = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(0.0);
    }
    let t = m / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok((2.0 * dist.cdf(-t.abs())).min(1.0))
}

/// Permutation, Wilcoxon and t-test on paired samples; a test is
/// significant when its p-value is below `alpha`.
pub fn significance_tests(a: &[f64], b: &[f64], alpha: f64) -> Result<SignificanceReport> {
    let permutation_p = paired_permutation_test(a, b, PERMUTATION_RESAMPLES, PERMUTATION_SEED)?;
    let wilcoxon_p = wilcoxon_signed_rank(a, b)?;
    let ttest_p = paired_t_test(a, b)?;
    Ok(SignificanceReport {
        n: a.len(),
        mean_a: mean(a),
        mean_b: mean(b),
        alpha,
        permutation_p,
        wilcoxon_p,
        ttest_p,
        permutation_significant: permutation_p < alpha,
        wilcoxon_significant: wilcoxon_p < alpha,
        ttest_significant: ttest_p < alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_are_not_significant() {
        let a = [0.1, 0.4, 0.3, 0.9];
        let r = significance_tests(&a, &a, 0.05).unwrap();
        assert_eq!((r.permutation_p, r.wilcoxon_p, r.ttest_p), (1.0, 1.0, 1.0));
        assert!(!r.permutation_significant && !r.wilcoxon_significant && !r.ttest_significant);
    }

    #[test]
    fn constant_shift_is_significant() {
        let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
        let r = significance_tests(&a, &b, 0.05).unwrap();
        assert!(r.permutation_significant && r.wilcoxon_significant && r.ttest_significant);
    }

    #[test]
    fn signed_rank_counts_sum_to_power_of_two() {
        for n in 1..20 {
            assert_eq!(signed_rank_counts(n).iter().sum::<f64>(), 2f64.powi(n as i32));
        }
        assert_eq!(signed_rank_counts(3), vec![1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mismatched_lengths_error() {
        assert!(significance_tests(&[1.0], &[1.0, 2.0], 0.05).is_err());
    }

    // Reference p-values from scipy.stats.wilcoxon and ttest_rel (SciPy 1.15).
    fn close(x: f64, want: f64) {
        assert!((x - want).abs() < 1e-9, "got {x}, want {want}");
    }

    #[test]
    fn matches_scipy_exact_branch() {
        let a = [1.83, 0.50, 1.62, 2.48, 1.68, 1.88, 1.55, 3.06, 1.30];
        let b = [0.878, 0.647, 0.598, 2.05, 1.06, 1.29, 1.06, 3.14, 1.29];
        close(wilcoxon_signed_rank(&a, &b).unwrap(), 0.0390625);
        close(paired_t_test(&a, &b).unwrap(), 0.016176627434908095);
    }

    #[test]
    fn matches_scipy_with_ties_and_zeros() {
        let a = [3.0, 4.0, 4.0, 5.0, 6.0, 2.0, 7.0, 1.0];
        let b = [2.0, 2.0, 2.0, 3.0, 5.0, 3.0, 4.0, 1.0];
        close(wilcoxon_signed_rank(&a, &b).unwrap(), 0.0625);
        close(paired_t_test(&a, &b).unwrap(), 0.02816139690900871);
    }

    #[test]
    fn matches_scipy_normal_branch() {
        let a = [2.34, -2.26, 0.72, -0.27, -0.15, 0.08, -1.72, 0.07, -0.57, 3.62, 0.53, -0.05, 0.02, -0.37, -0.76, -0.09, 0.78, 0.06, 1.26, 0.1, 0.32, 1.85, 0.85, -0.21, 0.12, 0.84, 2.24, 0.03, 0.06, 1.3, -0.59, 0.01, 1.18, 0.88, 0.39, 0.97, -2.53, 1.32, -0.66, -1.37, 0.58, 1.0, -0.14, -0.78, 0.33, 0.25, 1.71, 1.05, 0.49, 1.41, 0.09, -0.63, 0.88, 0.88, 0.09, -0.48, 0.53, -2.19, 0.99, 0.79, -1.34, 0.36, -0.66, 1.06, -1.73, -0.61, 1.01, 1.46, -1.86, -0.2, 0.63, -0.31, 1.89, -0.89, 0.65, -0.75, 1.71, 0.28, -0.07, -1.42];
        let b = [1.68, 0.75, 0.75, 1.14, 0.35, -0.64, -0.8, -0.8, 1.37, -1.46, -0.6, -0.32, 0.22, 0.58, -1.25, -1.73, -0.0, 1.21, 0.76, 0.22, -0.32, 0.29, -0.24, 0.82, -0.79, 0.13, -0.11, 0.54, 0.22, 2.55, 1.5, 1.5, -2.04, -0.34, -0.61, 0.53, -2.28, 1.17, 1.07, -1.3, -0.98, -0.8, 0.04, 0.64, 2.05, -0.2, 0.77, 0.16, 1.76, 0.74, 1.37, -1.08, -0.19, -0.81, 1.5, 0.66, -0.31, -0.45, 0.48, -0.7, -0.93, 0.48, 2.46, -0.25, -0.56, -1.17, -1.34, 0.52, 0.85, 0.01, 0.33, 0.12, 0.14, -1.53, -0.46, 0.11, -0.78, -0.48, -0.82, -0.33];
        close(wilcoxon_signed_rank(&a, &b).unwrap(), 0.3905900747250718);
        close(paired_t_test(&a, &b).unwrap(), 0.35789151595257096);
    }
}
