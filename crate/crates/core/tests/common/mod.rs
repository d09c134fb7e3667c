//! Naive reference implementations shared by the integration tests.
#![allow(dead_code)]

use chrono::NaiveDate;
use mpgat_core::features::{RawSeries, MA_LONG, MA_SHORT};
use rand::Rng;

pub fn start() -> chrono::NaiveDateTime {
    NaiveDate::from_ymd_opt(2021, 3, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

/// A random small series long enough for at least one sample.
pub struct SmallCase {
    pub series: RawSeries,
    pub t_in: usize,
    pub t_out: usize,
}

pub fn random_case(rng: &mut impl Rng) -> SmallCase {
    let n = rng.random_range(1..=4);
    let p = rng.random_range(2..=9);
    let t_in = rng.random_range(1..=4);
    let t_out = rng.random_range(1..=4);
    let t_total = (t_in - 1) * p + MA_LONG + t_out + rng.random_range(0..40);
    let columns: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..t_total)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        rng.random_range(0..60) as f64
                    } else {
                        rng.random_range(0.0..500.0)
                    }
                })
                .collect()
        })
        .collect();
    let ids = (0..n).map(|i| format!("n{i}")).collect();
    SmallCase {
        series: RawSeries::from_columns(ids, p, start(), &columns).unwrap(),
        t_in,
        t_out,
    }
}

/// Per-node trailing mean; `None` where the window is incomplete.
pub fn naive_moving_average(col: &[f64], window: usize) -> Vec<Option<f64>> {
    let mut out = Vec::new();
    for t in 0..col.len() {
        if t + 1 < window {
            out.push(None);
            continue;
        }
        let mut acc = 0.0;
        for s in (t + 1 - window)..=t {
            acc += col[s];
        }
        out.push(Some(acc / window as f64));
    }
    out
}

/// Same step on each of the `t_in` days ending at `t0`, oldest first.
pub fn naive_daily(col: &[f64], p: usize, t0: usize, t_in: usize) -> Option<Vec<f64>> {
    let mut out = Vec::new();
    for back in (0..t_in).rev() {
        let t = t0.checked_sub(back * p)?;
        out.push(col[t]);
    }
    Some(out)
}

/// `(t0, x[F][N][T_in], y[N][T_out])` for every origin whose features and
/// targets are fully defined, found by trying each step in turn.
pub fn naive_samples(series: &RawSeries, t_in: usize, t_out: usize) -> Vec<(usize, Vec<f64>, Vec<f64>)> {
    let n = series.n_nodes();
    let p = series.steps_per_day();
    let cols: Vec<Vec<f64>> = (0..n).map(|i| series.column(i)).collect();
    let ma5: Vec<_> = cols.iter().map(|c| naive_moving_average(c, MA_SHORT)).collect();
    let ma20: Vec<_> = cols.iter().map(|c| naive_moving_average(c, MA_LONG)).collect();
    let mut out = Vec::new();
    'origin: for t0 in 0..series.n_steps() {
        if t0 + t_out >= series.n_steps() || t0 + 1 < t_in {
            continue;
        }
        let mut x = vec![0.0; 4 * n * t_in];
        for node in 0..n {
            let Some(daily) = naive_daily(&cols[node], p, t0, t_in) else {
                continue 'origin;
            };
            for i in 0..t_in {
                let t = t0 + 1 + i - t_in;
                let (Some(a), Some(b)) = (ma5[node][t], ma20[node][t]) else {
                    continue 'origin;
                };
                x[node * t_in + i] = cols[node][t];
                x[(n + node) * t_in + i] = a;
                x[(2 * n + node) * t_in + i] = b;
                x[(3 * n + node) * t_in + i] = daily[i];
            }
        }
        let mut y = Vec::new();
        for col in &cols {
            y.extend_from_slice(&col[t0 + 1..=t0 + t_out]);
        }
        out.push((t0, x, y));
    }
    out
}

/// Doubled midranks of the pooled sample, counted pairwise.
pub fn doubled_midranks(pooled: &[f64]) -> Vec<u64> {
    pooled
        .iter()
        .map(|&v| {
            let less = pooled.iter().filter(|&&w| w < v).count() as u64;
            let equal = pooled.iter().filter(|&&w| w == v).count() as u64;
            2 * less + equal + 1
        })
        .collect()
}

/// Two-sided rank-sum p-value by enumerating every labelling of the pooled
/// sample into groups of sizes `a.len()` and `b.len()`.
pub fn brute_force_p_value(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = doubled_midranks(&pooled);
    let (n, total) = (a.len(), pooled.len());
    let observed: u64 = ranks[..n].iter().sum();
    let (mut le, mut ge, mut count) = (0u64, 0u64, 0u64);
    // size-n subsets in increasing order (Gosper's hack)
    let mut mask: u32 = (1 << n) - 1;
    while mask < 1 << total {
        let s: u64 = (0..total).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        count += 1;
        le += (s <= observed) as u64;
        ge += (s >= observed) as u64;
        if mask == 0 {
            break;
        }
        let low = mask & mask.wrapping_neg();
        let ripple = mask + low;
        mask = (((ripple ^ mask) >> 2) / low) | ripple;
    }
    (2.0 * le.min(ge) as f64 / count as f64).min(1.0)
}

pub fn random_sample(rng: &mut impl Rng, len: usize, tied: bool) -> Vec<f64> {
    (0..len)
        .map(|_| {
            if tied {
                rng.random_range(0..5) as f64
            } else {
                rng.random_range(-10.0..10.0)
            }
        })
        .collect()
}
