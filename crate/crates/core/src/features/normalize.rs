use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MultivariateSample;
use crate::error::{MpgatError, Result};

/// Per-node z-score statistics, fit on training inputs only. All feature
/// channels of a node share that node's statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on the distinct raw steps covered by the samples' count
    /// channel. Each step is counted once even though windows overlap.
    pub fn fit(train: &[MultivariateSample]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| MpgatError::Data("cannot fit a normalizer on no samples".into()))?;
        let (n, t_in) = (first.x.shape()[1], first.x.shape()[2]);
        let mut steps: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for s in train {
            for i in 0..t_in {
                let t = s.t0 + 1 + i - t_in;
                steps
                    .entry(t)
                    .or_insert_with(|| (0..n).map(|node| s.x.at(&[0, node, i])).collect());
            }
        }
        let count = steps.len() as f64;
        let mut mean = vec![0.0; n];
        for row in steps.values() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for row in steps.values() {
            for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.into_iter().map(|v| (v / count).sqrt()).collect();
        if let Some(node) = std.iter().position(|&s| s <= 1e-12 || !s.is_finite()) {
            return Err(MpgatError::Data(format!(
                "node {node} has zero variance on the training split"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn n_nodes(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes a node-major block `[.., N, L]` laid out as `rows` of
    /// length `len` whose node index is `row % N`.
    fn map_rows(&self, data: &mut [f64], len: usize, f: impl Fn(f64, f64, f64) -> f64) {
        let n = self.n_nodes();
        for (r, row) in data.chunks_mut(len).enumerate() {
            let node = r % n;
            let (m, s) = (self.mean[node], self.std[node]);
            row.iter_mut().for_each(|v| *v = f(*v, m, s));
        }
    }

    /// In-place normalization of an `[F, N, T]` (or `[N, T]`) buffer.
    pub fn normalize(&self, data: &mut [f64], last_dim: usize) {
        self.map_rows(data, last_dim, |v, m, s| (v - m) / s);
    }

    pub fn denormalize(&self, data: &mut [f64], last_dim: usize) {
        self.map_rows(data, last_dim, |v, m, s| v * s + m);
    }

    pub fn normalize_sample(&self, sample: &MultivariateSample) -> MultivariateSample {
        let mut out = sample.clone();
        let t_in = sample.x.shape()[2];
        let t_out = sample.y.shape()[1];
        self.normalize(out.x.values_mut(), t_in);
        self.normalize(out.y.values_mut(), t_out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn sample(t0: usize, q: Vec<f64>, n: usize, t_in: usize) -> MultivariateSample {
        let mut x = vec![0.0; 4 * n * t_in];
        x[..n * t_in].copy_from_slice(&q);
        MultivariateSample {
            x: Tensor::new([4, n, t_in], x).unwrap(),
            y: Tensor::zeros([n, 1]),
            t0,
        }
    }

    #[test]
    fn two_value_node() {
        let s = [sample(0, vec![0.0], 1, 1), sample(1, vec![2.0], 1, 1)];
        let norm = Normalizer::fit(&s).unwrap();
        assert_eq!((norm.mean[0], norm.std[0]), (1.0, 1.0));
        let mut v = vec![0.0, 2.0];
        norm.normalize(&mut v, 1);
        assert_eq!(v, vec![-1.0, 1.0]);
    }

    #[test]
    fn zero_variance_rejected() {
        let s = [sample(0, vec![3.0], 1, 1), sample(1, vec![3.0], 1, 1)];
        assert!(Normalizer::fit(&s).is_err());
    }

    #[test]
    fn round_trip() {
        let norm = Normalizer {
            mean: vec![10.0, -3.0],
            std: vec![4.0, 0.25],
        };
        let orig: Vec<f64> = (0..24).map(|i| (i as f64).powf(1.3) - 5.0).collect();
        let mut v = orig.clone();
        norm.normalize(&mut v, 3);
        norm.denormalize(&mut v, 3);
        for (a, b) in v.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn overlapping_windows_count_each_step_once() {
        // windows [t-1, t] for t0 = 1, 2: distinct steps 0,1,2 -> values 0,1,5
        let s = [sample(1, vec![0.0, 1.0], 1, 2), sample(2, vec![1.0, 5.0], 1, 2)];
        let norm = Normalizer::fit(&s).unwrap();
        assert!((norm.mean[0] - 2.0).abs() < 1e-12);
    }
}
