// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wilcoxon signed-rank, Mann–Whitney U and one-sided one-sample t tests.
//!
//! Small samples use exact null distributions computed by dynamic
//! programming over doubled ranks (midranks stay integral), so ties are
//! handled exactly.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Largest Wilcoxon sample with an exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;
/// Largest smaller-sample size with an exact Mann–Whitney distribution.
pub const MWU_EXACT_MAX: usize = 8;

/// How a p-value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    /// Exact signed-rank enumeration.
    WilcoxonExact,
    /// Tie-corrected normal approximation.
    WilcoxonNormal,
    /// Exact rank-sum enumeration.
    MannWhitneyExact,
    /// Tie-corrected normal approximation.
    MannWhitneyNormal,
    /// Student's t distribution.
    StudentT,
}

/// Statistic and p-value of one test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Test statistic.
    pub statistic: f64,
    /// p-value in `[0, 1]`.
    pub p_value: f64,
    /// Sample size(s) after dropping zero differences.
    pub n: Vec<usize>,
    /// Method used.
    pub method: TestMethod,
}

/// Options shared by the rank tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RankTestOptions {
    /// Apply a 0.5 continuity correction in the normal approximation.
    pub continuity: bool,
}

/// Average ranks (1-based) of `values`, plus the sizes of tie groups.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn tie_term(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum()
}

fn normal_sf(z: f64) -> f64 {
    Normal::standard().sf(z)
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(0.0, 1.0)
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// The statistic is `min(W⁺, W⁻)`. Zero differences are dropped.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)], opts: RankTestOptions) -> Result<TestResult> {
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Input("non-finite difference".to_owned()));
    }
    let n = diffs.len();
    if n == 0 {
        return Err(Error::Degenerate("all paired differences are zero".to_owned()));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = midranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    if n <= WILCOXON_EXACT_MAX {
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let obs = (w_plus * 2.0).round() as usize;
        let all = 2f64.powi(n as i32);
        let lower: u64 = counts[..=obs].iter().sum();
        let upper: u64 = counts[obs..].iter().sum();
        let p = 2.0 * (lower.min(upper) as f64) / all;
        return Ok(TestResult {
            statistic,
            p_value: clamp_p(p),
            n: vec![n],
            method: TestMethod::WilcoxonExact,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term(&ties) / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let mut dev = (w_plus - mean).abs();
        if opts.continuity {
            dev = (dev - 0.5).max(0.0);
        }
        2.0 * normal_sf(dev / var.sqrt())
    };
    Ok(TestResult { statistic, p_value: clamp_p(p), n: vec![n], method: TestMethod::WilcoxonNormal })
}

/// Mann–Whitney U test; the statistic is `U` of sample `a`.
///
/// One-sided mode tests `a > b` (`p = P(U ≥ u)`).
pub fn mann_whitney_u(a: &[f64], b: &[f64], two_sided: bool, opts: RankTestOptions) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("Mann-Whitney needs two non-empty samples".to_owned()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite observation".to_owned()));
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;
    let nn = (na * nb) as f64;

    if na.min(nb) <= MWU_EXACT_MAX {
        // Distribution of the doubled rank sum of the smaller sample.
        let (k, own) = if na <= nb { (na, true) } else { (nb, false) };
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let mut sorted = doubled.clone();
        sorted.sort_unstable_by(|x, y| y.cmp(x));
        let max: usize = sorted[..k].iter().sum();
        let mut dp = vec![vec![0u128; max + 1]; k + 1];
        dp[0][0] = 1;
        for &r in &doubled {
            for j in (1..=k).rev() {
                for s in (r..=max).rev() {
                    let add = dp[j - 1][s - r];
                    if add != 0 {
                        dp[j][s] += add;
                    }
                }
            }
        }
        let dist = &dp[k];
        let total: u128 = dist.iter().sum();
        let offset = k * (k + 1);
        // 2·U_small = S₂ − k(k+1); U_a = n_a·n_b − U_b when b is the smaller.
        let u2_of = |s: usize| -> i64 {
            let u_small2 = s as i64 - offset as i64;
            if own {
                u_small2
            } else {
                2 * (na * nb) as i64 - u_small2
            }
        };
        let obs2 = (u * 2.0).round() as i64;
        let mut ge = 0u128;
        let mut le = 0u128;
        for (s, &c) in dist.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let v = u2_of(s);
            if v >= obs2 {
                ge += c;
            }
            if v <= obs2 {
                le += c;
            }
        }
        let p = if two_sided {
            2.0 * (ge.min(le) as f64) / total as f64
        } else {
            ge as f64 / total as f64
        };
        return Ok(TestResult {
            statistic: u,
            p_value: clamp_p(p),
            n: vec![na, nb],
            method: TestMethod::MannWhitneyExact,
        });
    }

    let n = (na + nb) as f64;
    let mean = nn / 2.0;
    let var = nn / 12.0 * ((n + 1.0) - tie_term(&ties) / (n * (n - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let cc = if opts.continuity { 0.5 } else { 0.0 };
        let sd = var.sqrt();
        if two_sided {
            2.0 * normal_sf((((u - mean).abs()) - cc).max(0.0) / sd)
        } else {
            normal_sf((u - mean - cc) / sd)
        }
    };
    Ok(TestResult { statistic: u, p_value: clamp_p(p), n: vec![na, nb], method: TestMethod::MannWhitneyNormal })
}

/// One-sided (upper-tail) one-sample t test against `mu0`.
pub fn t_test_one_sided(sample: &[f64], mu0: f64) -> Result<TestResult> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::Input("t test needs at least two observations".to_owned()));
    }
    let m = mean(sample);
    let sd = sample_std(sample);
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::Degenerate("sample variance is zero".to_owned()));
    }
    let t = (m - mu0) / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Degenerate(format!("t distribution: {e}")))?;
    Ok(TestResult { statistic: t, p_value: clamp_p(dist.sf(t)), n: vec![n], method: TestMethod::StudentT })
}

/// Arithmetic mean (NaN when empty).
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n − 1` denominator); 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Median (mean of the middle pair for even lengths); `None` when empty.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { (v[k - 1] + v[k]) / 2.0 })
}
