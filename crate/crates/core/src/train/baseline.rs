use super::Forecaster;
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::features::MultivariateSample;

/// Repeats the last observed count at every horizon.
#[derive(Debug, Clone, Copy, Default)]
pub struct Persistence;

pub fn persistence_baseline(sample: &MultivariateSample, t_out: usize) -> Tensor {
    let (n, t_in) = (sample.x.shape()[1], sample.x.shape()[2]);
    let values = (0..n)
        .flat_map(|node| std::iter::repeat_n(sample.x.at(&[0, node, t_in - 1]), t_out))
        .collect();
    Tensor::new([n, t_out], values).expect("shape matches")
}

impl Forecaster for Persistence {
    fn name(&self) -> &str {
        "persistence"
    }

    fn forecast(&self, samples: &[MultivariateSample]) -> Result<Vec<Tensor>> {
        Ok(samples
            .iter()
            .map(|s| persistence_baseline(s, s.y.shape()[1]))
            .collect())
    }
}
