//! Two-sided Wilcoxon rank-sum test with midranks.
//!
//! Small samples (both sides at most [`EXACT_LIMIT`]) use the exact
//! permutation distribution of the rank sum, computed by dynamic
//! programming over doubled midranks. Larger samples use the normal
//! approximation with tie and continuity corrections.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

/// Largest per-side size handled by exact enumeration.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PValueMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    /// +1 when `a` is significantly lower (better MAPE), −1 when
    /// significantly higher, 0 otherwise.
    pub h: i8,
    pub p_value: f64,
    /// Rank sum of `a` in the pooled sample.
    pub statistic: f64,
    pub method: PValueMethod,
}

/// Midranks (1-based) of the pooled sample.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pooled_ranks(a: &[f64], b: &[f64]) -> Vec<f64> {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    midranks(&pooled)
}

/// Rank sum of `a` within `a ∪ b`.
pub fn rank_sum(a: &[f64], b: &[f64]) -> f64 {
    pooled_ranks(a, b)[..a.len()].iter().sum()
}

/// Exact two-sided p-value `min(1, 2·min(P(W ≤ w), P(W ≥ w)))` where `W`
/// is the rank sum of a random size-`|a|` subset of the pooled ranks.
pub fn exact_p_value(a: &[f64], b: &[f64]) -> f64 {
    let ranks = pooled_ranks(a, b);
    let n = a.len();
    // doubled midranks are integers
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let observed: usize = doubled[..n].iter().sum();
    let max_sum: usize = doubled.iter().sum();
    // counts[k][s]: subsets of size k with doubled rank sum s
    let mut counts = vec![vec![0u64; max_sum + 1]; n + 1];
    counts[0][0] = 1;
    for &r in &doubled {
        for k in (1..=n).rev() {
            let (lower, upper) = counts.split_at_mut(k);
            let prev = &lower[k - 1];
            for s in (r..=max_sum).rev() {
                upper[0][s] += prev[s - r];
            }
        }
    }
    let total: u64 = counts[n].iter().sum();
    let le: u64 = counts[n][..=observed].iter().sum();
    let ge: u64 = counts[n][observed..].iter().sum();
    let tail = le.min(ge) as f64 / total as f64;
    (2.0 * tail).min(1.0)
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity
/// correction.
pub fn normal_p_value(a: &[f64], b: &[f64]) -> f64 {
    let ranks = pooled_ranks(a, b);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let total = n + m;
    let w: f64 = ranks[..a.len()].iter().sum();
    let mean = n * (total + 1.0) / 2.0;

    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
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
    let var = n * m / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Compares two MAPE samples; `h = +1` means `a` is significantly better
/// (lower).
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64], alpha: f64) -> SignificanceResult {
    assert!(a.len() >= 2 && b.len() >= 2, "rank-sum test needs two values per side");
    let method = if a.len() <= EXACT_LIMIT && b.len() <= EXACT_LIMIT {
        PValueMethod::Exact
    } else {
        PValueMethod::Normal
    };
    let p_value = match method {
        PValueMethod::Exact => exact_p_value(a, b),
        PValueMethod::Normal => normal_p_value(a, b),
    };
    let statistic = rank_sum(a, b);
    let h = if p_value >= alpha {
        0
    } else {
        let (ma, mb) = (mean(a), mean(b));
        if ma < mb {
            1
        } else if ma > mb {
            -1
        } else {
            // equal means: fall back to the rank sum direction
            let expected = a.len() as f64 * (a.len() + b.len() + 1) as f64 / 2.0;
            if statistic < expected {
                1
            } else if statistic > expected {
                -1
            } else {
                0
            }
        }
    };
    SignificanceResult {
        h,
        p_value,
        statistic,
        method,
    }
}
