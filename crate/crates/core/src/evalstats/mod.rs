//! Rank statistics, interval estimates and the evaluation protocol drivers.

mod protocol;

pub use protocol::{
    cross_organ, nr_monotonicity, read_csv, CsvRow, run_protocol, task_anchor, ConditionStats, CrossOrganRow,
    EvalConfig, InputDigest, NrScoreRow, Protocol, ProtocolReport, Provenance, TaskAnchorRow,
    QUANTILE_METHOD,
};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::nr::log_sum_exp;

/// Values with their fractional (tie-averaged) ranks, 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankVector {
    pub values: Vec<f64>,
    pub ranks: Vec<f64>,
}

impl RankVector {
    pub fn new(values: &[f64]) -> Self {
        Self {
            values: values.to_vec(),
            ranks: fractional_ranks(values),
        }
    }
}

pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "correlation needs at least 2 observations, got {}",
            a.len()
        )));
    }
    if let Some(v) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(Error::Range(format!("non-finite observation {v}")));
    }
    Ok(())
}

/// Pearson correlation of tie-averaged ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let ra = fractional_ranks(a);
    let rb = fractional_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sxy += (x - ma) * (y - mb);
        sxx += (x - ma) * (x - ma);
        syy += (y - mb) * (y - mb);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("Spearman correlation of a constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Kendall's tau-b.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let s = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            if a[i] == a[j] || b[i] == b[j] {
                continue;
            }
            if s > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let n1 = tie_pairs(a);
    let n2 = tie_pairs(b);
    if n0 == n1 || n0 == n2 {
        return Err(Error::Undefined("Kendall tau with every pair tied".into()));
    }
    let denom = (((n0 - n1) * (n0 - n2)) as f64).sqrt();
    Ok(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}

/// Number of tied pairs, `sum t(t-1)/2` over tie groups.
fn tie_pairs(v: &[f64]) -> i64 {
    tie_groups(v).iter().map(|&t| (t * (t - 1) / 2) as i64).sum()
}

fn tie_groups(v: &[f64]) -> Vec<usize> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let mut j = i + 1;
        while j < s.len() && s[j] == s[i] {
            j += 1;
        }
        groups.push(j - i);
        i = j;
    }
    groups
}

/// Kendall's coefficient of concordance with tie correction. Each inner
/// slice holds one judge's scores for the same `n` items.
pub fn kendall_w(rankings: &[Vec<f64>]) -> Result<f64> {
    let m = rankings.len();
    if m < 2 {
        return Err(Error::InsufficientData(format!("Kendall W needs at least 2 judges, got {m}")));
    }
    let n = rankings[0].len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("Kendall W needs at least 2 items, got {n}")));
    }
    if let Some(r) = rankings.iter().find(|r| r.len() != n) {
        return Err(Error::Shape(format!("judge ranks {} items, expected {n}", r.len())));
    }
    let mut sums = vec![0.0; n];
    let mut ties = 0.0;
    for judge in rankings {
        for (s, r) in sums.iter_mut().zip(fractional_ranks(judge)) {
            *s += r;
        }
        ties += tie_groups(judge)
            .iter()
            .map(|&t| (t * t * t - t) as f64)
            .sum::<f64>();
    }
    let (mf, nf) = (m as f64, n as f64);
    let mean = mf * (nf + 1.0) / 2.0;
    let s: f64 = sums.iter().map(|r| (r - mean) * (r - mean)).sum();
    let denom = mf * mf * (nf * nf * nf - nf) - mf * ties;
    if denom <= 0.0 {
        return Err(Error::Undefined("Kendall W with every judge fully tied".into()));
    }
    Ok((12.0 * s / denom).clamp(0.0, 1.0))
}

/// Linear-interpolation quantile over sorted data (inclusive method:
/// position `(n - 1) q`).
pub fn quantile_inclusive(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn iqr(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData("IQR of an empty sample".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok((quantile_inclusive(&s, 0.75) - quantile_inclusive(&s, 0.25)).max(0.0))
}

fn check_counts(successes: u64, n: u64) -> Result<()> {
    if n == 0 || successes > n {
        return Err(Error::Range(format!("need 0 <= successes <= n and n >= 1, got {successes}/{n}")));
    }
    Ok(())
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_ci(successes: u64, n: u64, level: f64) -> Result<(f64, f64)> {
    check_counts(successes, n)?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Range(format!("confidence level {level} not in (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (center + half).min(1.0) };
    Ok((lo, hi))
}

/// Exact two-sided binomial test: total probability of outcomes no more
/// likely than the observed one.
pub fn binomial_test_two_sided(successes: u64, n: u64, p0: f64) -> Result<f64> {
    check_counts(successes, n)?;
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Range(format!("null proportion {p0} not in (0, 1)")));
    }
    let ln_pmf = |k: u64| ln_binomial(n, k) + k as f64 * p0.ln() + (n - k) as f64 * (1.0 - p0).ln();
    let observed = ln_pmf(successes);
    // relative slack so outcomes equally likely up to rounding are counted
    let cutoff = observed + 1e-7f64.ln_1p();
    let terms: Vec<f64> = (0..=n).map(ln_pmf).filter(|&l| l <= cutoff).collect();
    if terms.len() as u64 == n + 1 {
        return Ok(1.0);
    }
    Ok(log_sum_exp(&terms).exp().min(1.0))
}
