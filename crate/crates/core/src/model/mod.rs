//! The MPGAT network.
//!
//! ```text
//! x[B,F,N,T] ─ lift ─ M-GAT ×2 ─ count channel ─ 1×1 ─┐
//!   ┌──────────────────────────────────────────────────┘
//!   └─ 8 × [ gated TCN ─┬─ P-GAT(fwd + bwd + global) ─ + 1×1(block input) ]
//!                       └─ skip tap at the last step ─ Σ ─ ReLU ─ 1×1 ─ ReLU ─ 1×1 ─ ŷ[B,N,T_out]
//! ```

mod config;
pub mod layers;
mod params;

pub use config::ModelConfig;
pub use params::{BlockWeights, BranchWeights, HeadWeights, MpgatParams, Weights};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{MpgatError, Result};
use crate::graph::{Direction, IntersectionGraph};

/// Blocked-entry masks for the two directional branches; the global
/// branch is unmasked.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMasks {
    pub n: usize,
    pub forward: Vec<bool>,
    pub backward: Vec<bool>,
}

impl AttentionMasks {
    pub fn from_graph(graph: &IntersectionGraph) -> Self {
        Self {
            n: graph.n(),
            forward: graph.adjacency(Direction::Forward).blocked_mask(),
            backward: graph.adjacency(Direction::Backward).blocked_mask(),
        }
    }

    pub fn for_direction(&self, direction: Direction) -> Option<&[bool]> {
        match direction {
            Direction::Forward => Some(&self.forward),
            Direction::Backward => Some(&self.backward),
            Direction::Global => None,
        }
    }
}

/// Sum of the forward, backward and global propagation branches on
/// `v[B, N, T, C]`.
pub fn pgat_block(
    tape: &mut Tape,
    v: Var,
    masks: &AttentionMasks,
    branches: &[BranchWeights<Var>],
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (direction, w) in Direction::ALL.iter().zip(branches) {
        let a = layers::pgat_attention_matrix(
            tape,
            v,
            masks.for_direction(*direction),
            w.attention,
            cfg.leaky_slope,
        )?;
        let out = layers::pgat_propagate(tape, v, a, cfg.beta, cfg.prop_steps, w.mixer)?;
        total = Some(match total {
            Some(t) => tape.add(t, out)?,
            None => out,
        });
    }
    total.ok_or_else(|| MpgatError::contract("P-GAT needs at least one branch"))
}

fn ensure_finite(tape: &Tape, v: Var, place: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(MpgatError::NonFinite(place()))
    }
}

/// Runs the network on `x[B, F, N, T_in]` (normalized units) and returns
/// `ŷ[B, N, T_out]` in normalized units.
pub fn mpgat_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    masks: &AttentionMasks,
    x: Var,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != cfg.n_features || s[2] != cfg.n_nodes || s[3] != cfg.t_in {
        return Err(MpgatError::dim(format!(
            "input {s:?} does not match [B, {}, {}, {}]",
            cfg.n_features, cfg.n_nodes, cfg.t_in
        )));
    }
    if masks.n != cfg.n_nodes {
        return Err(MpgatError::dim(format!(
            "graph has {} nodes, model expects {}",
            masks.n, cfg.n_nodes
        )));
    }
    let (b, f, n, t) = (s[0], s[1], s[2], s[3]);
    let (dl, c) = (cfg.d_latent, cfg.d_residual);
    let positions = b * n * t;

    let h = layers::project_multivariate(tape, x, w.input_projection)?;
    let mut h = tape.reshape(h, [positions, f, dl])?;
    for (i, wc) in w.mgat.iter().enumerate() {
        h = layers::mgat_layer(tape, h, *wc, cfg.leaky_slope)?;
        ensure_finite(tape, h, || format!("M-GAT layer {i}"))?;
    }
    let v = layers::distill_q(tape, h, w.post_mgat)?;
    let mut v = tape.reshape(v, [b * n, t, c])?;

    let mut skip_total: Option<Var> = None;
    for (i, blk) in w.blocks.iter().enumerate() {
        let block_input = v;
        let gated = layers::tcn_forward(tape, v, blk.filter, blk.gate, cfg.dilation(i))?;
        let last = tape.select(gated, 1, t - 1)?;
        let skip = tape.matmul(last, blk.skip)?;
        skip_total = Some(match skip_total {
            Some(acc) => tape.add(acc, skip)?,
            None => skip,
        });
        let spatial_in = tape.reshape(gated, [b, n, t, c])?;
        let spatial = pgat_block(tape, spatial_in, masks, &blk.branches, cfg)?;
        let spatial = tape.reshape(spatial, [positions, c])?;
        let flat_in = tape.reshape(block_input, [positions, c])?;
        let residual = tape.matmul(flat_in, blk.residual)?;
        let out = tape.add(spatial, residual)?;
        ensure_finite(tape, out, || format!("spatial-temporal block {i}"))?;
        v = tape.reshape(out, [b * n, t, c])?;
    }

    let skip = skip_total.ok_or_else(|| MpgatError::Config("model has no blocks".into()))?;
    let z = tape.relu(skip);
    let z = tape.matmul(z, w.head.hidden)?;
    let z = tape.add_bias(z, w.head.hidden_bias)?;
    let z = tape.relu(z);
    let z = tape.matmul(z, w.head.out)?;
    let y = tape.add_bias(z, w.head.out_bias)?;
    ensure_finite(tape, y, || "output head".to_string())?;
    tape.reshape(y, [b, n, cfg.t_out])
}

/// A configured network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mpgat {
    pub config: ModelConfig,
    pub params: MpgatParams,
}

impl Mpgat {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = MpgatParams::init(&config, seed);
        Ok(Self { config, params })
    }

    /// Inference without gradient bookkeeping on the parameters.
    pub fn predict(&self, masks: &AttentionMasks, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let frozen = self.params.map(|t| {
            let mut c = t.clone();
            c.set_requires_grad(false);
            c
        });
        let w = frozen.leaves(&mut tape);
        let xv = tape.leaf(x);
        let y = mpgat_forward(&mut tape, &self.config, &w, masks, xv)?;
        Ok(tape.to_tensor(y))
    }
}
