//! From raw per-intersection counts to normalized multivariate samples.

mod normalize;
mod series;
mod split;
mod synth;
mod windows;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use normalize::Normalizer;
pub use series::{
    format_timestamp, ingest_csv, parse_timestamp, read_csv, RawSeries, STEPS_PER_DAY, STEP_MINUTES,
};
pub use split::{split, SplitRatios, SplitSizes};
pub use synth::{synth_generate, SynthConfig};
pub use windows::{
    build_samples, daily_feature, input_at, moving_average, sample_range, MovingAverage,
    MultivariateSample, FEATURE_ORDER, MA_LONG, MA_SHORT, N_FEATURES,
};

use crate::error::{MpgatError, Result};

/// Samples split chronologically, with the normalizer fit on `train`.
/// Samples keep raw units; normalization happens at batch assembly.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<MultivariateSample>,
    pub val: Vec<MultivariateSample>,
    pub test: Vec<MultivariateSample>,
    pub normalizer: Normalizer,
}

pub fn prepare(series: &RawSeries, t_in: usize, t_out: usize, ratios: SplitRatios) -> Result<PreparedData> {
    let samples = build_samples(series, t_in, t_out)?;
    let (train, val, test) = split(samples, ratios)?;
    let normalizer = Normalizer::fit(&train)?;
    Ok(PreparedData {
        train,
        val,
        test,
        normalizer,
    })
}

pub const CACHE_VERSION: &str = "mpgat-prepared-v1";

/// On-disk record of a prepared dataset. Samples are rebuilt from the
/// stored series, which is cheaper than storing every overlapping window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedCache {
    pub version: String,
    pub feature_order: Vec<String>,
    pub t_in: usize,
    pub t_out: usize,
    pub ratios: SplitRatios,
    pub sizes: SplitSizes,
    pub first_t0: usize,
    pub normalizer: Normalizer,
    pub series: RawSeries,
}

impl PreparedCache {
    pub fn new(series: &RawSeries, data: &PreparedData, t_in: usize, t_out: usize, ratios: SplitRatios) -> Self {
        Self {
            version: CACHE_VERSION.to_string(),
            feature_order: FEATURE_ORDER.iter().map(|s| s.to_string()).collect(),
            t_in,
            t_out,
            ratios,
            sizes: SplitSizes {
                train: data.train.len(),
                val: data.val.len(),
                test: data.test.len(),
            },
            first_t0: data.train.first().map_or(0, |s| s.t0),
            normalizer: data.normalizer.clone(),
            series: series.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let cache: Self = serde_json::from_reader(std::io::BufReader::new(file))?;
        if cache.version != CACHE_VERSION {
            return Err(MpgatError::Data(format!(
                "prepared cache version {:?}, expected {CACHE_VERSION:?}",
                cache.version
            )));
        }
        if cache.feature_order != FEATURE_ORDER {
            return Err(MpgatError::Data("prepared cache has a different feature order".into()));
        }
        Ok(cache)
    }

    /// Rebuilds the split and checks it against the recorded sizes and
    /// normalizer.
    pub fn restore(&self) -> Result<PreparedData> {
        let data = prepare(&self.series, self.t_in, self.t_out, self.ratios)?;
        let sizes = SplitSizes {
            train: data.train.len(),
            val: data.val.len(),
            test: data.test.len(),
        };
        if sizes != self.sizes || data.normalizer != self.normalizer {
            return Err(MpgatError::Data("prepared cache does not match its series".into()));
        }
        Ok(data)
    }
}
