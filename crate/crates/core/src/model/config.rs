use serde::{Deserialize, Serialize};

use crate::autodiff::LEAKY_SLOPE;
use crate::error::{MpgatError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_nodes: usize,
    /// 4 for the full multivariate stack, 1 for counts only.
    pub n_features: usize,
    pub t_in: usize,
    pub t_out: usize,
    /// M-GAT latent width.
    pub d_latent: usize,
    /// Channel width inside the spatial-temporal blocks.
    pub d_residual: usize,
    pub d_skip: usize,
    pub d_end: usize,
    pub n_blocks: usize,
    pub kernel: usize,
    /// Dilations cycled over the blocks.
    pub dilations: Vec<usize>,
    pub beta: f64,
    pub prop_steps: usize,
    pub leaky_slope: f64,
    pub mgat_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_nodes: 6,
            n_features: 4,
            t_in: 12,
            t_out: 12,
            d_latent: 32,
            d_residual: 32,
            d_skip: 64,
            d_end: 128,
            n_blocks: 8,
            kernel: 2,
            dilations: vec![1, 2],
            beta: 0.05,
            prop_steps: 2,
            leaky_slope: LEAKY_SLOPE,
            mgat_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn dilation(&self, block: usize) -> usize {
        self.dilations[block % self.dilations.len()]
    }

    /// `1 + (K − 1) · Σ dilation` over the block stack.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * (0..self.n_blocks).map(|b| self.dilation(b)).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MpgatError::Config(m));
        if self.n_nodes == 0 || self.t_in == 0 || self.t_out == 0 {
            return fail("n_nodes, t_in and t_out must be positive".into());
        }
        if self.n_features != 1 && self.n_features != 4 {
            return fail(format!("n_features must be 1 or 4, got {}", self.n_features));
        }
        if [self.d_latent, self.d_residual, self.d_skip, self.d_end, self.n_blocks, self.kernel]
            .contains(&0)
        {
            return fail("layer widths, block count and kernel must be positive".into());
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return fail("dilations must be non-empty and >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail("leaky slope must lie in (0, 1)".into());
        }
        if self.mgat_layers == 0 {
            return fail("at least one M-GAT layer is required".into());
        }
        if self.receptive_field() < self.t_in {
            return fail(format!(
                "receptive field {} does not cover t_in = {}",
                self.receptive_field(),
                self.t_in
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_stack_covers_input() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.receptive_field(), 13);
        assert!(cfg.validate().is_ok());
        assert_eq!(
            (0..8).map(|b| cfg.dilation(b)).collect::<Vec<_>>(),
            vec![1, 2, 1, 2, 1, 2, 1, 2]
        );
    }

    #[test]
    fn rejects_short_stack_and_bad_beta() {
        let short = ModelConfig {
            n_blocks: 4,
            ..ModelConfig::default()
        };
        assert!(short.validate().is_err());
        let beta = ModelConfig {
            beta: 1.5,
            ..ModelConfig::default()
        };
        assert!(beta.validate().is_err());
    }
}
