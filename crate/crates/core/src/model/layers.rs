//! Building blocks of the network, expressed as tape operations.
//!
//! Activations are channel-last. `P` below is the number of (sample, node,
//! time) positions, `B` the batch size.

use crate::autodiff::{Tape, Var, MASK_FILL};
use crate::error::{MpgatError, Result};

/// Lifts `x[B, F, N, T]` to `H[B, N, T, F, D′]` with one `1 → D′` projection
/// per feature channel.
pub fn project_multivariate(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    if tape.shape(x).len() != 4 {
        return Err(MpgatError::dim(format!("expected [B,F,N,T], got {:?}", tape.shape(x))));
    }
    let xp = tape.permute(x, &[0, 2, 3, 1])?;
    tape.lift(xp, w)
}

/// Splits a `[2·D]` attention vector into a `[D, 2]` matrix whose columns
/// score the "self" and "other" halves of a concatenated pair.
fn attention_columns(tape: &mut Tape, w: Var) -> Result<Var> {
    let len = tape.shape(w)[0];
    if tape.shape(w).len() != 1 || !len.is_multiple_of(2) {
        return Err(MpgatError::dim(format!("attention vector of shape {:?}", tape.shape(w))));
    }
    let halves = tape.reshape(w, [2, len / 2])?;
    tape.transpose(halves)
}

/// Pairwise scores `e[p, i, j] = wᵀ(h[p, i] ‖ h[p, j])` for `h[P, M, D]`.
fn pair_scores(tape: &mut Tape, h: Var, w: Var) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 {
        return Err(MpgatError::dim(format!("expected [P, M, D], got {s:?}")));
    }
    let (p, m, d) = (s[0], s[1], s[2]);
    let cols = attention_columns(tape, w)?;
    if tape.shape(cols)[0] != d {
        return Err(MpgatError::dim(format!(
            "attention vector of length {} for width {d}",
            2 * tape.shape(cols)[0]
        )));
    }
    let flat = tape.reshape(h, [p * m, d])?;
    let halves = tape.matmul(flat, cols)?;
    let halves = tape.reshape(halves, [p, m, 2])?;
    let own = tape.select(halves, 2, 0)?;
    let other = tape.select(halves, 2, 1)?;
    tape.pair_sum(own, other)
}

/// M-GAT attention over the feature channels at every position:
/// `a[p, i, j] = softmax_j(LeakyReLU(w_cᵀ(H_i ‖ H_j)))` for `h[P, F, D′]`.
pub fn mgat_attention(tape: &mut Tape, h: Var, w_c: Var, slope: f64) -> Result<Var> {
    let e = pair_scores(tape, h, w_c)?;
    let e = tape.leaky_relu(e, slope);
    tape.softmax_lastdim(e)
}

/// One M-GAT layer: `Ĥ_i = ReLU(Σ_j a_ij H_j)`, same shape as `h`.
pub fn mgat_layer(tape: &mut Tape, h: Var, w_c: Var, slope: f64) -> Result<Var> {
    let a = mgat_attention(tape, h, w_c, slope)?;
    let mixed = tape.bmm(a, h)?;
    Ok(tape.relu(mixed))
}

/// Keeps only the count channel (feature 0) of `h[P, F, D′]` and projects
/// it to `[P, D″]`.
pub fn distill_q(tape: &mut Tape, h: Var, w_post: Var) -> Result<Var> {
    let q = tape.select(h, 1, 0)?;
    tape.matmul(q, w_post)
}

/// Gated temporal unit `tanh(conv_f(v)) ⊙ σ(conv_g(v))` on `v[R, T, C]`.
pub fn tcn_forward(tape: &mut Tape, v: Var, filter: Var, gate: Var, dilation: usize) -> Result<Var> {
    let f = tape.causal_conv(v, filter, dilation)?;
    let g = tape.causal_conv(v, gate, dilation)?;
    let f = tape.tanh(f);
    let g = tape.sigmoid(g);
    tape.mul(f, g)
}

/// Row-stochastic node attention `A[B, N, N]` from `v[B, N, T, C]`.
///
/// Node summaries are time means; `blocked` (an `N×N` row-major mask,
/// `true` = not a neighbor) is filled with a large negative value before
/// the LeakyReLU-softmax so blocked entries come out exactly zero.
pub fn pgat_attention_matrix(
    tape: &mut Tape,
    v: Var,
    blocked: Option<&[bool]>,
    w_p: Var,
    slope: f64,
) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 4 {
        return Err(MpgatError::dim(format!("expected [B, N, T, C], got {s:?}")));
    }
    let (b, n) = (s[0], s[1]);
    let summary = tape.mean_axis(v, 2)?;
    let mut e = pair_scores(tape, summary, w_p)?;
    if let Some(mask) = blocked {
        if mask.len() != n * n {
            return Err(MpgatError::dim(format!("mask of length {} for {n} nodes", mask.len())));
        }
        let batched: Vec<bool> = mask.iter().copied().cycle().take(b * n * n).collect();
        e = tape.masked_fill(e, &batched, MASK_FILL)?;
    }
    let e = tape.leaky_relu(e, slope);
    tape.softmax_lastdim(e)
}

/// States `V⁰ … V^U` of `V^μ = (1−β)·V_in + β·A·V^{μ−1}` for
/// `v[B, N, T, C]`, `a[B, N, N]`.
pub fn propagation_states(tape: &mut Tape, v: Var, a: Var, beta: f64, steps: usize) -> Result<Vec<Var>> {
    let s = tape.shape(v).to_vec();
    if s.len() != 4 {
        return Err(MpgatError::dim(format!("expected [B, N, T, C], got {s:?}")));
    }
    let flat = tape.reshape(v, [s[0], s[1], s[2] * s[3]])?;
    let mut states = vec![flat];
    let mut current = flat;
    for _ in 0..steps {
        let spread = tape.bmm(a, current)?;
        current = tape.axpby(1.0 - beta, flat, beta, spread)?;
        states.push(current);
    }
    states
        .into_iter()
        .map(|st| tape.reshape(st, s.clone()))
        .collect()
}

/// `Δ(V⁰ ‖ … ‖ V^U)`: concatenates the propagation states on the channel
/// axis and mixes them back to `C` channels.
pub fn pgat_propagate(tape: &mut Tape, v: Var, a: Var, beta: f64, steps: usize, mixer: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    let states = propagation_states(tape, v, a, beta, steps)?;
    let stacked = tape.concat(&states, 3)?;
    let rows = s[0] * s[1] * s[2];
    let stacked = tape.reshape(stacked, [rows, (steps + 1) * s[3]])?;
    let mixed = tape.matmul(stacked, mixer)?;
    tape.reshape(mixed, s)
}
