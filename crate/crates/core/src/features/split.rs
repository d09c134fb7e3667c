use serde::{Deserialize, Serialize};

use crate::error::{MpgatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitRatios {
    /// Floor-rounded train/val sizes; the remainder goes to test.
    pub fn sizes(&self, n: usize) -> Result<SplitSizes> {
        let total = self.train + self.val + self.test;
        if (total - 1.0).abs() > 1e-9 || [self.train, self.val, self.test].iter().any(|r| *r < 0.0) {
            return Err(MpgatError::Data(format!(
                "split ratios must be non-negative and sum to 1, got {total}"
            )));
        }
        let train = (self.train * n as f64 + 1e-9).floor() as usize;
        let val = (self.val * n as f64 + 1e-9).floor() as usize;
        let sizes = SplitSizes {
            train,
            val,
            test: n.saturating_sub(train + val),
        };
        if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
            return Err(MpgatError::Data(format!(
                "{n} samples give an empty partition ({}/{}/{})",
                sizes.train, sizes.val, sizes.test
            )));
        }
        Ok(sizes)
    }
}

/// Chronological split: the input must already be ordered by time.
pub fn split<T>(samples: Vec<T>, ratios: SplitRatios) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let sizes = ratios.sizes(samples.len())?;
    let mut train = samples;
    let mut val = train.split_off(sizes.train);
    let test = val.split_off(sizes.val);
    Ok((train, val, test))
}
