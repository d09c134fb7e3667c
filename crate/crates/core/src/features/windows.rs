use serde::{Deserialize, Serialize};

use super::RawSeries;
use crate::autodiff::Tensor;
use crate::error::{MpgatError, Result};

/// Channel order of every sample's input tensor.
pub const FEATURE_ORDER: [&str; 4] = ["q", "ma5", "ma20", "daily"];
pub const N_FEATURES: usize = 4;
pub const MA_SHORT: usize = 5;
pub const MA_LONG: usize = 20;

/// Trailing mean over `window` steps, per node. Entries before
/// `valid_from` have incomplete history and hold NaN.
#[derive(Debug, Clone)]
pub struct MovingAverage {
    pub window: usize,
    pub valid_from: usize,
    n_nodes: usize,
    values: Vec<f64>,
}

impl MovingAverage {
    pub fn get(&self, t: usize, node: usize) -> f64 {
        self.values[t * self.n_nodes + node]
    }

    pub fn is_valid(&self, t: usize) -> bool {
        t >= self.valid_from
    }

    /// Time-major `T×N` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn moving_average(series: &RawSeries, window: usize) -> Result<MovingAverage> {
    if window == 0 {
        return Err(MpgatError::Data("moving-average window must be >= 1".into()));
    }
    let (t_total, n) = (series.n_steps(), series.n_nodes());
    let mut values = vec![f64::NAN; t_total * n];
    for t in window.saturating_sub(1)..t_total {
        for node in 0..n {
            let mut acc = 0.0;
            for s in t + 1 - window..=t {
                acc += series.count(s, node);
            }
            values[t * n + node] = acc / window as f64;
        }
    }
    Ok(MovingAverage {
        window,
        valid_from: window - 1,
        n_nodes: n,
        values,
    })
}

/// Same time-of-day on the `t_in − 1` preceding days plus `t0` itself,
/// oldest first, as a time-major `t_in × N` block.
pub fn daily_feature(series: &RawSeries, t0: usize, t_in: usize) -> Result<Vec<f64>> {
    let p = series.steps_per_day();
    let span = (t_in.max(1) - 1) * p;
    if t_in == 0 || t0 < span || t0 >= series.n_steps() {
        return Err(MpgatError::Data(format!(
            "daily feature at t0={t0} needs steps {}..={t0} in a series of {}",
            t0 as i64 - span as i64,
            series.n_steps()
        )));
    }
    let n = series.n_nodes();
    let mut out = Vec::with_capacity(t_in * n);
    for i in 0..t_in {
        let t = t0 - (t_in - 1 - i) * p;
        out.extend((0..n).map(|node| series.count(t, node)));
    }
    Ok(out)
}

/// One forecasting example: `x` is `[F, N, T_in]` in [`FEATURE_ORDER`],
/// `y` is `[N, T_out]` raw counts for steps `t0+1 ..= t0+T_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultivariateSample {
    pub x: Tensor,
    pub y: Tensor,
    pub t0: usize,
}

/// First and last admissible `t0` for the given window lengths.
pub fn sample_range(series: &RawSeries, t_in: usize, t_out: usize) -> Option<(usize, usize)> {
    let p = series.steps_per_day();
    let first = ((t_in - 1) * p).max(t_in - 1 + MA_LONG - 1);
    let last = series.n_steps().checked_sub(1 + t_out)?;
    (first <= last).then_some((first, last))
}

pub(crate) struct FeatureCache {
    ma_short: MovingAverage,
    ma_long: MovingAverage,
}

impl FeatureCache {
    pub fn new(series: &RawSeries) -> Result<Self> {
        Ok(Self {
            ma_short: moving_average(series, MA_SHORT)?,
            ma_long: moving_average(series, MA_LONG)?,
        })
    }

    /// Input block `[F, N, T_in]` ending at `t0`.
    pub fn input(&self, series: &RawSeries, t0: usize, t_in: usize) -> Result<Tensor> {
        let n = series.n_nodes();
        let daily = daily_feature(series, t0, t_in)?;
        let mut x = vec![0.0; N_FEATURES * n * t_in];
        for node in 0..n {
            for i in 0..t_in {
                let t = t0 + 1 + i - t_in;
                if !self.ma_long.is_valid(t) {
                    return Err(MpgatError::Data(format!("t0={t0} lacks moving-average history")));
                }
                let at = |f: usize| (f * n + node) * t_in + i;
                x[at(0)] = series.count(t, node);
                x[at(1)] = self.ma_short.get(t, node);
                x[at(2)] = self.ma_long.get(t, node);
                x[at(3)] = daily[i * n + node];
            }
        }
        Tensor::new([N_FEATURES, n, t_in], x)
    }
}

/// Builds one sample per admissible `t0`, in increasing `t0` order.
pub fn build_samples(series: &RawSeries, t_in: usize, t_out: usize) -> Result<Vec<MultivariateSample>> {
    if t_in == 0 || t_out == 0 {
        return Err(MpgatError::Data("t_in and t_out must be >= 1".into()));
    }
    let (first, last) = sample_range(series, t_in, t_out).ok_or_else(|| {
        MpgatError::Data(format!(
            "series of {} steps is too short for any sample with t_in={t_in}, t_out={t_out}",
            series.n_steps()
        ))
    })?;
    let cache = FeatureCache::new(series)?;
    let n = series.n_nodes();
    (first..=last)
        .map(|t0| {
            let x = cache.input(series, t0, t_in)?;
            let mut y = vec![0.0; n * t_out];
            for node in 0..n {
                for h in 0..t_out {
                    y[node * t_out + h] = series.count(t0 + 1 + h, node);
                }
            }
            Ok(MultivariateSample {
                x,
                y: Tensor::new([n, t_out], y)?,
                t0,
            })
        })
        .collect()
}

/// Input block for an arbitrary `t0` (used for forecasting past the last
/// labelled step).
pub fn input_at(series: &RawSeries, t0: usize, t_in: usize) -> Result<Tensor> {
    let p = series.steps_per_day();
    let first = ((t_in - 1) * p).max(t_in - 1 + MA_LONG - 1);
    if t0 < first || t0 >= series.n_steps() {
        return Err(MpgatError::Data(format!(
            "forecast origin {t0} needs history back to step {}; admissible origins are {first}..={}",
            t0 as i64 - first as i64,
            series.n_steps() - 1
        )));
    }
    FeatureCache::new(series)?.input(series, t0, t_in)
}
