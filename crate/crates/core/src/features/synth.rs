//! Synthetic diurnal traffic with lagged coupling along a directed path.

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{RawSeries, STEPS_PER_DAY};
use crate::error::{MpgatError, Result};
use crate::graph::IntersectionGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub days: usize,
    /// Ratio between the busiest and the quietest step of the noise-free
    /// daily profile.
    pub peak_ratio: f64,
    /// Standard deviation of the log-scale multiplicative noise.
    pub noise_level: f64,
    pub seed: u64,
    /// Noise-free count at the quietest step.
    pub base_level: f64,
    /// Weight of the upstream node's lagged signal and noise.
    pub coupling: f64,
    /// Upstream lag in steps.
    pub lag: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodes: 6,
            days: 60,
            peak_ratio: 200.0,
            noise_level: 0.1,
            seed: 7,
            base_level: 10.0,
            coupling: 0.6,
            lag: 2,
        }
    }
}

fn bump(phase: f64, centre: f64, width: f64) -> f64 {
    let mut d = (phase - centre).rem_euclid(1.0);
    if d > 0.5 {
        d -= 1.0;
    }
    (-d * d / (2.0 * width * width)).exp()
}

/// Generates counts plus the directed path graph `0 → 1 → … → n−1` along
/// which upstream traffic propagates with a lag.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(RawSeries, IntersectionGraph)> {
    if cfg.days < 2 {
        return Err(MpgatError::Config("synthetic data needs at least 2 days".into()));
    }
    if cfg.peak_ratio <= 1.0 || cfg.n_nodes == 0 || cfg.base_level <= 0.0 || cfg.noise_level < 0.0 {
        return Err(MpgatError::Config(
            "synthetic data needs peak_ratio > 1, nodes >= 1, base_level > 0, noise_level >= 0".into(),
        ));
    }
    let p = STEPS_PER_DAY;
    let n = cfg.n_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Uniform::new(-0.03, 0.03).expect("valid range");
    let level = Uniform::new(0.7, 1.5).expect("valid range");

    // one periodic day per node; downstream nodes add the upstream day
    // shifted by the lag
    let mut profiles: Vec<Vec<f64>> = Vec::with_capacity(n);
    for node in 0..n {
        let evening = 0.75 + jitter.sample(&mut rng);
        let morning = 0.34 + jitter.sample(&mut rng);
        let mut day: Vec<f64> = (0..p)
            .map(|s| {
                let phase = s as f64 / p as f64;
                bump(phase, evening, 0.11) + 0.6 * bump(phase, morning, 0.07)
            })
            .collect();
        if node > 0 {
            let up = &profiles[node - 1];
            for (s, v) in day.iter_mut().enumerate() {
                *v += cfg.coupling * up[(s + p - cfg.lag % p) % p];
            }
        }
        profiles.push(day);
    }
    let mut scaled = Vec::with_capacity(n);
    for day in &profiles {
        let lo = cfg.base_level * level.sample(&mut rng);
        let hi = lo * cfg.peak_ratio;
        let (min, max) = day
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        scaled.push(
            day.iter()
                .map(|v| lo + (v - min) * (hi - lo) / (max - min))
                .collect::<Vec<_>>(),
        );
    }

    let t_total = cfg.days * p;
    let sigma = cfg.noise_level;
    let mut columns = vec![vec![0.0; t_total]; n];
    let mut eta = vec![vec![0.0; t_total]; n];
    let mut eta_var = 1.0;
    for node in 0..n {
        let day_scale: Vec<f64> = (0..cfg.days)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (0.5 * sigma * z).exp()
            })
            .collect();
        for t in 0..t_total {
            let e: f64 = StandardNormal.sample(&mut rng);
            eta[node][t] = e
                + if node > 0 && t >= cfg.lag {
                    cfg.coupling * eta[node - 1][t - cfg.lag]
                } else {
                    0.0
                };
        }
        if node > 0 {
            eta_var = 1.0 + cfg.coupling * cfg.coupling * eta_var;
        }
        let eta_sd = eta_var.sqrt();
        for t in 0..t_total {
            let clean = scaled[node][t % p];
            columns[node][t] = if sigma == 0.0 {
                clean
            } else {
                clean * day_scale[t / p] * (sigma * eta[node][t] / eta_sd).exp()
            };
        }
    }
    let ids = (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
    let start = NaiveDate::from_ymd_opt(2020, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let series = RawSeries::from_columns(ids.clone(), p, start, &columns)?;
    let edges = (1..n).map(|i| (i - 1, i)).collect();
    let graph = IntersectionGraph::new(n, edges, Some(ids))?;
    Ok((series, graph))
}
