use crate::autodiff::{Tape, Var};
use crate::error::{MpgatError, Result};

/// Mean absolute error between two equally shaped tape values.
pub fn mae_loss(tape: &mut Tape, prediction: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(prediction, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

/// Running MAPE accumulator; zero targets are skipped.
#[derive(Debug, Clone, Copy, Default)]
pub struct MapeAccumulator {
    sum: f64,
    count: usize,
}

impl MapeAccumulator {
    pub fn push(&mut self, prediction: f64, target: f64) {
        if target > 0.0 {
            self.sum += (target - prediction).abs() / target;
            self.count += 1;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn value(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(MpgatError::UndefinedMetric(
                "MAPE needs at least one positive target".into(),
            ));
        }
        Ok(self.sum / self.count as f64)
    }
}

/// Mean of `|y − ŷ| / y` over elements with `y > 0`.
pub fn mape(prediction: &[f64], target: &[f64]) -> Result<f64> {
    if prediction.len() != target.len() {
        return Err(MpgatError::dim(format!(
            "mape: {} predictions for {} targets",
            prediction.len(),
            target.len()
        )));
    }
    let mut acc = MapeAccumulator::default();
    for (&p, &y) in prediction.iter().zip(target) {
        acc.push(p, y);
    }
    acc.value()
}
