//! Two-sided Wilcoxon signed-rank test for paired scores.
//!
//! Zero differences are dropped. Ties share their average rank. Up to
//! [`EXACT_MAX_N`] non-zero pairs, the null distribution of `W+` is counted
//! exactly over all `2^n` sign assignments; beyond that a normal
//! approximation with tie and continuity corrections is used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EXACT_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_effective: usize,
    /// `min(W+, W-)`.
    #[serde(rename = "W")]
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    #[serde(rename = "p")]
    pub p_value: f64,
    pub method: Method,
    /// Set when every difference was zero.
    pub degenerate: bool,
}

/// Ranks of `|d|` (1-based, ties averaged), doubled so they are integers.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 averaged, doubled
        let r2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = r2;
        }
        i = j + 1;
    }
    ranks
}

/// Null distribution of the doubled `W+` statistic: entry `k` is the
/// probability that `2 W+ = k` when every sign is equally likely.
pub fn null_distribution(doubled: &[u64]) -> Vec<f64> {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c != 0.0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    let denom = 2f64.powi(doubled.len() as i32);
    counts.iter().map(|c| c / denom).collect()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(a, b, None)
}

/// As [`wilcoxon_signed_rank`], optionally forcing the p-value method.
pub fn wilcoxon_signed_rank_with(
    a: &[f64],
    b: &[f64],
    method: Option<Method>,
) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("no paired scores".into()));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidConfig("non-finite score difference".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n_effective: 0,
            statistic: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            method: method.unwrap_or(Method::Exact),
            degenerate: true,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let w_plus2: u64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total2: u64 = ranks.iter().sum();
    let w_minus2 = total2 - w_plus2;
    let w2 = w_plus2.min(w_minus2);
    let method = method.unwrap_or(if n <= EXACT_MAX_N {
        Method::Exact
    } else {
        Method::NormalApprox
    });
    let p = match method {
        Method::Exact => {
            let pmf = null_distribution(&ranks);
            let tail: f64 = pmf[..=w2 as usize].iter().sum();
            (2.0 * tail).min(1.0)
        }
        Method::NormalApprox => {
            let nf = n as f64;
            let mean = nf * (nf + 1.0) / 4.0;
            let mut tie_term = 0.0;
            let mut sorted = ranks.clone();
            sorted.sort_unstable();
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
            let w = w2 as f64 / 2.0;
            let num = ((mean - w).abs() - 0.5).max(0.0);
            if var <= 0.0 {
                1.0
            } else {
                (2.0 * normal_cdf(-num / var.sqrt())).min(1.0)
            }
        }
    };
    Ok(WilcoxonResult {
        n_effective: n,
        statistic: w2 as f64 / 2.0,
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: w_minus2 as f64 / 2.0,
        p_value: p,
        method,
        degenerate: false,
    })
}
