//! Flat `key = value` settings: defaults, then the config file, then flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mpgat_core::features::{SplitRatios, SynthConfig};
use mpgat_core::model::ModelConfig;
use mpgat_core::train::{TrainConfig, REPORT_HORIZONS};

use crate::Failure;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub data: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub run_name: Option<String>,
    pub seed: u64,
    pub tin: usize,
    pub tout: usize,
    pub beta: f64,
    pub blocks: usize,
    pub lr: f64,
    pub runs: usize,
    pub alpha: f64,
    pub features: usize,
    pub horizons: Vec<usize>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip: f64,
    /// 0 means no cap.
    pub max_batches: usize,
    /// 0 means the whole validation split.
    pub max_val: usize,
    pub d_latent: usize,
    pub d_residual: usize,
    pub d_skip: usize,
    pub d_end: usize,
    pub prop_steps: usize,
    pub workers: usize,
    pub nodes: usize,
    pub days: usize,
    pub peak_ratio: f64,
    pub noise: f64,
    pub split: SplitRatios,
    pub cache_out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub at: Option<String>,
    pub clamp_zero: bool,
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub a_name: String,
    pub b_name: String,
    pub from: Option<PathBuf>,
    pub plot_horizon: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let synth = SynthConfig::default();
        Self {
            data: None,
            graph: None,
            out: None,
            run_name: None,
            seed: 0,
            tin: model.t_in,
            tout: model.t_out,
            beta: model.beta,
            blocks: model.n_blocks,
            lr: train.lr,
            runs: 1,
            alpha: 0.05,
            features: model.n_features,
            horizons: REPORT_HORIZONS.to_vec(),
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            grad_clip: train.grad_clip_norm,
            max_batches: 0,
            max_val: 0,
            d_latent: model.d_latent,
            d_residual: model.d_residual,
            d_skip: model.d_skip,
            d_end: model.d_end,
            prop_steps: model.prop_steps,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            nodes: synth.n_nodes,
            days: synth.days,
            peak_ratio: synth.peak_ratio,
            noise: synth.noise_level,
            split: SplitRatios::default(),
            cache_out: None,
            checkpoint: None,
            at: None,
            clamp_zero: false,
            a: None,
            b: None,
            a_name: "MPGAT".into(),
            b_name: "MPGAT-1".into(),
            from: None,
            plot_horizon: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Failure> {
    value
        .parse()
        .map_err(|_| Failure::Validation(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, Failure> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        let v = value.trim();
        match key {
            "data" => self.data = opt_path(v),
            "graph" => self.graph = opt_path(v),
            "out" => self.out = opt_path(v),
            "run_name" => self.run_name = (!v.is_empty()).then(|| v.to_string()),
            "seed" => self.seed = parse(key, v)?,
            "tin" => self.tin = parse(key, v)?,
            "tout" => self.tout = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "runs" => self.runs = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "features" => self.features = parse(key, v)?,
            "horizons" => self.horizons = parse_list(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "max_batches" => self.max_batches = parse(key, v)?,
            "max_val" => self.max_val = parse(key, v)?,
            "d_latent" => self.d_latent = parse(key, v)?,
            "d_residual" => self.d_residual = parse(key, v)?,
            "d_skip" => self.d_skip = parse(key, v)?,
            "d_end" => self.d_end = parse(key, v)?,
            "prop_steps" => self.prop_steps = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "nodes" => self.nodes = parse(key, v)?,
            "days" => self.days = parse(key, v)?,
            "peak_ratio" => self.peak_ratio = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "split" => {
                let r: Vec<f64> = parse_list(key, v)?;
                let [train, val, test] = r[..] else {
                    return Err(Failure::Validation("split needs three ratios, e.g. 0.7,0.1,0.2".into()));
                };
                self.split = SplitRatios { train, val, test };
            }
            "cache_out" => self.cache_out = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "at" => self.at = (!v.is_empty()).then(|| v.to_string()),
            "clamp_zero" => self.clamp_zero = parse(key, v)?,
            "a" => self.a = opt_path(v),
            "b" => self.b = opt_path(v),
            "a_name" => self.a_name = v.to_string(),
            "b_name" => self.b_name = v.to_string(),
            "from" => self.from = opt_path(v),
            "plot_horizon" => self.plot_horizon = parse(key, v)?,
            _ => return Err(Failure::Validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<(), Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Validation(format!("config file {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Failure::Validation(format!("{}:{}: expected key = value", path.display(), i + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// The effective settings in the same format [`Settings::load_file`]
    /// reads.
    pub fn to_kv(&self) -> String {
        let s = self;
        let rows: Vec<(&str, String)> = vec![
            ("data", show_path(&s.data)),
            ("graph", show_path(&s.graph)),
            ("out", show_path(&s.out)),
            ("run_name", s.run_name.clone().unwrap_or_default()),
            ("seed", s.seed.to_string()),
            ("tin", s.tin.to_string()),
            ("tout", s.tout.to_string()),
            ("beta", s.beta.to_string()),
            ("blocks", s.blocks.to_string()),
            ("lr", s.lr.to_string()),
            ("runs", s.runs.to_string()),
            ("alpha", s.alpha.to_string()),
            ("features", s.features.to_string()),
            ("horizons", show_list(&s.horizons)),
            ("batch_size", s.batch_size.to_string()),
            ("max_epochs", s.max_epochs.to_string()),
            ("patience", s.patience.to_string()),
            ("grad_clip", s.grad_clip.to_string()),
            ("max_batches", s.max_batches.to_string()),
            ("max_val", s.max_val.to_string()),
            ("d_latent", s.d_latent.to_string()),
            ("d_residual", s.d_residual.to_string()),
            ("d_skip", s.d_skip.to_string()),
            ("d_end", s.d_end.to_string()),
            ("prop_steps", s.prop_steps.to_string()),
            ("workers", s.workers.to_string()),
            ("nodes", s.nodes.to_string()),
            ("days", s.days.to_string()),
            ("peak_ratio", s.peak_ratio.to_string()),
            ("noise", s.noise.to_string()),
            ("split", show_list(&[s.split.train, s.split.val, s.split.test])),
            ("cache_out", show_path(&s.cache_out)),
            ("checkpoint", show_path(&s.checkpoint)),
            ("at", s.at.clone().unwrap_or_default()),
            ("clamp_zero", s.clamp_zero.to_string()),
            ("a", show_path(&s.a)),
            ("b", show_path(&s.b)),
            ("a_name", s.a_name.clone()),
            ("b_name", s.b_name.clone()),
            ("from", show_path(&s.from)),
            ("plot_horizon", s.plot_horizon.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn model_config(&self, n_nodes: usize) -> ModelConfig {
        ModelConfig {
            n_nodes,
            n_features: self.features,
            t_in: self.tin,
            t_out: self.tout,
            d_latent: self.d_latent,
            d_residual: self.d_residual,
            d_skip: self.d_skip,
            d_end: self.d_end,
            n_blocks: self.blocks,
            beta: self.beta,
            prop_steps: self.prop_steps,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            grad_clip_norm: self.grad_clip,
            seed,
            max_batches_per_epoch: (self.max_batches > 0).then_some(self.max_batches),
            max_val_samples: (self.max_val > 0).then_some(self.max_val),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_nodes: self.nodes,
            days: self.days,
            peak_ratio: self.peak_ratio,
            noise_level: self.noise,
            seed: self.seed,
            ..SynthConfig::default()
        }
    }

    /// Horizons must be 1-based steps inside the forecast window.
    pub fn check_horizons(&self, t_out: usize) -> Result<(), Failure> {
        if self.horizons.is_empty() {
            return Err(Failure::Validation("at least one report horizon is required".into()));
        }
        if let Some(&h) = self.horizons.iter().find(|&&h| h == 0 || h > t_out) {
            return Err(Failure::Validation(format!(
                "report horizon {h} is outside the forecast window 1..={t_out}; lower horizons or raise --tout"
            )));
        }
        Ok(())
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
        value
            .as_deref()
            .ok_or_else(|| Failure::Usage(format!("missing required --{flag}")))
    }
}
