//! Training loop, evaluation and run statistics.

mod baseline;
mod metrics;
mod report;
mod wilcoxon;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use baseline::{persistence_baseline, Persistence};
pub use metrics::{mae_loss, mape, MapeAccumulator};
pub use report::{
    compare_reports, comparison_csv, comparison_table, format_mean_std, horizon_minutes, mean_std,
    read_reports_jsonl, summarize, write_reports_jsonl, HorizonComparison, HorizonScores,
    HorizonSummary, RunReport, REPORT_HORIZONS,
};
pub use wilcoxon::{
    exact_p_value, midranks, normal_p_value, rank_sum, wilcoxon_rank_sum, PValueMethod,
    SignificanceResult, EXACT_LIMIT,
};

use crate::autodiff::{clip_grad_norm, Adam, Tape, Tensor};
use crate::error::{MpgatError, Result};
use crate::features::{MultivariateSample, Normalizer};
use crate::model::{mpgat_forward, AttentionMasks, Mpgat};

/// Anything that maps samples to raw-unit forecasts `[N, T_out]`.
pub trait Forecaster {
    fn name(&self) -> &str;
    fn forecast(&self, samples: &[MultivariateSample]) -> Result<Vec<Tensor>>;
}

/// Stacks samples into normalized `x[B, F, N, T_in]` and `y[B, N, T_out]`.
/// With `n_features == 1` only the count channel is kept.
pub fn assemble_batch(
    samples: &[&MultivariateSample],
    normalizer: &Normalizer,
    n_features: usize,
) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| MpgatError::Data("empty batch".into()))?;
    let xs = first.x.shape();
    let (n, t_in, t_out) = (xs[1], xs[2], first.y.shape()[1]);
    if n_features > xs[0] {
        return Err(MpgatError::dim(format!(
            "model wants {n_features} features, samples carry {}",
            xs[0]
        )));
    }
    let x_len = n_features * n * t_in;
    let mut x = Vec::with_capacity(samples.len() * x_len);
    let mut y = Vec::with_capacity(samples.len() * n * t_out);
    for s in samples {
        if s.x.shape() != xs || s.y.shape() != first.y.shape() {
            return Err(MpgatError::dim("samples in a batch differ in shape"));
        }
        let start = x.len();
        x.extend_from_slice(&s.x.values()[..x_len]);
        normalizer.normalize(&mut x[start..], t_in);
        let start = y.len();
        y.extend_from_slice(s.y.values());
        normalizer.normalize(&mut y[start..], t_out);
    }
    let b = samples.len();
    Ok((
        Tensor::new([b, n_features, n, t_in], x)?,
        Tensor::new([b, n, t_out], y)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Caps the number of optimizer steps per epoch.
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
    /// Evaluates on an evenly strided subset of the validation split.
    #[serde(default)]
    pub max_val_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 64,
            max_epochs: 100,
            patience: 15,
            grad_clip_norm: 5.0,
            seed: 0,
            max_batches_per_epoch: None,
            max_val_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MpgatError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(MpgatError::Config("batch size, epoch count and patience must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(MpgatError::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(MpgatError::Config("gradient clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mape: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_mape: f64,
}

/// A model bound to its graph masks and normalizer.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Mpgat,
    pub masks: AttentionMasks,
    pub normalizer: Normalizer,
    /// Samples per forward pass during inference.
    pub eval_batch: usize,
}

impl TrainedModel {
    pub fn new(model: Mpgat, masks: AttentionMasks, normalizer: Normalizer) -> Self {
        Self {
            model,
            masks,
            normalizer,
            eval_batch: 128,
        }
    }
}

impl Forecaster for TrainedModel {
    fn name(&self) -> &str {
        "MPGAT"
    }

    fn forecast(&self, samples: &[MultivariateSample]) -> Result<Vec<Tensor>> {
        let cfg = &self.model.config;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.eval_batch.max(1)) {
            let refs: Vec<&MultivariateSample> = chunk.iter().collect();
            let (x, _) = assemble_batch(&refs, &self.normalizer, cfg.n_features)?;
            let mut y = self.model.predict(&self.masks, &x)?;
            self.normalizer.denormalize(y.values_mut(), cfg.t_out);
            let per = cfg.n_nodes * cfg.t_out;
            for v in y.values().chunks(per) {
                out.push(Tensor::new([cfg.n_nodes, cfg.t_out], v.to_vec())?);
            }
        }
        Ok(out)
    }
}

/// MAPE over all nodes and samples at each requested horizon (1-based).
pub fn evaluate(
    forecaster: &dyn Forecaster,
    samples: &[MultivariateSample],
    horizons: &[usize],
) -> Result<HorizonScores> {
    let preds = forecaster.forecast(samples)?;
    score_forecasts(&preds, samples, horizons)
}

pub fn score_forecasts(
    preds: &[Tensor],
    samples: &[MultivariateSample],
    horizons: &[usize],
) -> Result<HorizonScores> {
    if preds.len() != samples.len() {
        return Err(MpgatError::dim("one forecast per sample expected"));
    }
    let mut accs = vec![MapeAccumulator::default(); horizons.len()];
    for (p, s) in preds.iter().zip(samples) {
        let (n, t_out) = (s.y.shape()[0], s.y.shape()[1]);
        if p.shape() != s.y.shape() {
            return Err(MpgatError::dim(format!(
                "forecast {:?} vs target {:?}",
                p.shape(),
                s.y.shape()
            )));
        }
        for (acc, &h) in accs.iter_mut().zip(horizons) {
            if h == 0 || h > t_out {
                return Err(MpgatError::Config(format!("horizon {h} outside 1..={t_out}")));
            }
            for node in 0..n {
                acc.push(p.values()[node * t_out + h - 1], s.y.values()[node * t_out + h - 1]);
            }
        }
    }
    Ok(HorizonScores(
        horizons
            .iter()
            .zip(&accs)
            .map(|(&h, a)| Ok((h, a.value()?)))
            .collect::<Result<_>>()?,
    ))
}

/// Mean MAPE over every horizon step.
fn overall_mape(tm: &TrainedModel, samples: &[MultivariateSample]) -> Result<f64> {
    let preds = tm.forecast(samples)?;
    let mut acc = MapeAccumulator::default();
    for (p, s) in preds.iter().zip(samples) {
        for (&a, &b) in p.values().iter().zip(s.y.values()) {
            acc.push(a, b);
        }
    }
    acc.value()
}

fn strided_subset(samples: &[MultivariateSample], cap: Option<usize>) -> Vec<MultivariateSample> {
    match cap {
        Some(c) if c > 0 && c < samples.len() => {
            let stride = samples.len() as f64 / c as f64;
            (0..c).map(|i| samples[(i as f64 * stride) as usize].clone()).collect()
        }
        _ => samples.to_vec(),
    }
}

/// Trains with Adam on MAE in normalized space, early-stopping on
/// validation MAPE. On return `tm.model` holds the best parameters seen.
pub fn train(
    tm: &mut TrainedModel,
    train_set: &[MultivariateSample],
    val_set: &[MultivariateSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(MpgatError::Data("training needs non-empty train and validation splits".into()));
    }
    let mcfg = tm.model.config.clone();
    let val = strided_subset(val_set, cfg.max_val_samples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory {
        best_val_mape: f64::INFINITY,
        ..TrainHistory::default()
    };
    let mut best = tm.model.params.clone();
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (batch_idx, idx) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_batches_per_epoch.is_some_and(|m| batch_idx >= m) {
                break;
            }
            let refs: Vec<&MultivariateSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = assemble_batch(&refs, &tm.normalizer, mcfg.n_features)?;
            let params = &mut tm.model.params;
            params.zero_grads();
            let mut tape = Tape::new();
            let w = params.leaves(&mut tape);
            let xv = tape.leaf(&x);
            let yv = tape.leaf(&y);
            let pred = mpgat_forward(&mut tape, &mcfg, &w, &tm.masks, xv)?;
            let loss = mae_loss(&mut tape, pred, yv)?;
            let lv = tape.value(loss)[0];
            if !lv.is_finite() {
                return Err(MpgatError::Divergence {
                    epoch,
                    batch: batch_idx,
                    loss: lv,
                });
            }
            tape.backward(loss)?;
            params.accumulate_grads(&tape, &w)?;
            let mut tensors = params.iter_mut();
            clip_grad_norm(&mut tensors, cfg.grad_clip_norm);
            adam.step(&mut tensors)?;
            history.batch_losses.push(lv);
            loss_sum += lv;
            steps += 1;
        }
        let val_mape = overall_mape(tm, &val)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps.max(1) as f64,
            val_mape,
        });
        if val_mape < history.best_val_mape {
            history.best_val_mape = val_mape;
            history.best_epoch = epoch;
            best = tm.model.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    tm.model.params = best;
    Ok(history)
}

/// Trains a fresh model for `seed`, then scores it on `test_set`.
pub fn train_and_evaluate(
    model: Mpgat,
    masks: &AttentionMasks,
    normalizer: &Normalizer,
    splits: (&[MultivariateSample], &[MultivariateSample], &[MultivariateSample]),
    cfg: &TrainConfig,
    horizons: &[usize],
) -> Result<(TrainedModel, RunReport)> {
    let start = Instant::now();
    let mut tm = TrainedModel::new(model, masks.clone(), normalizer.clone());
    let history = train(&mut tm, splits.0, splits.1, cfg)?;
    let mape = evaluate(&tm, splits.2, horizons)?;
    let report = RunReport {
        seed: cfg.seed,
        mape,
        epochs: history.epochs.len(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((tm, report))
}

#[derive(Debug, Clone)]
pub struct MultiRunOutcome {
    pub reports: Vec<RunReport>,
    /// Seeds whose run failed, with the error text.
    pub failures: Vec<(u64, String)>,
}

/// Runs `run` for seeds `seed0 .. seed0 + runs` on up to `workers`
/// threads. Reports come back in seed order. Failed runs are excluded from
/// the reports; the whole call fails when fewer than `runs - runs / 6`
/// complete.
pub fn multi_run<F>(runs: usize, seed0: u64, workers: usize, run: F) -> Result<MultiRunOutcome>
where
    F: Fn(u64) -> Result<RunReport> + Sync,
{
    if runs < 2 {
        return Err(MpgatError::Config(format!("multi_run needs at least 2 runs, got {runs}")));
    }
    let workers = workers.clamp(1, runs);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(u64, Result<RunReport>)>> = Mutex::new(Vec::with_capacity(runs));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= runs {
                    break;
                }
                let seed = seed0 + i as u64;
                let outcome = run(seed);
                results.lock().expect("no worker panicked").push((seed, outcome));
            });
        }
    });
    let mut results = results.into_inner().expect("no worker panicked");
    results.sort_by_key(|r| r.0);
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (seed, outcome) in results {
        match outcome {
            Ok(r) => reports.push(r),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    let needed = runs - runs / 6;
    if reports.len() < needed {
        return Err(MpgatError::Data(format!(
            "only {} of {runs} runs completed (need {needed}); first failure: {}",
            reports.len(),
            failures.first().map(|f| f.1.as_str()).unwrap_or("none")
        )));
    }
    Ok(MultiRunOutcome { reports, failures })
}
