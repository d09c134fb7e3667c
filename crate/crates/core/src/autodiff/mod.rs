//! Dense `f64` tensors with tape-based reverse-mode differentiation and an
//! Adam optimizer.
//!
//! A forward pass records every operation on a [`Tape`]; values are
//! addressed through copyable [`Var`] handles. Parameters live outside the
//! tape as [`Tensor`]s and are copied in as leaves, so one set of parameters
//! can be evaluated on many tapes (for instance from several threads).

mod adam;
mod gradcheck;
mod linalg;
mod tape;
mod tensor;

pub use adam::{clip_grad_norm, Adam};
pub use gradcheck::{gradient_check, relative_error, NOISE_FLOOR};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Negative slope used by every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Pre-softmax fill for non-adjacent attention entries.
pub const MASK_FILL: f64 = -9e15;

/// Single-sequence causal convolution in channel-first layout:
/// `x[C_in, T]` and `w[C_out, C_in, K]` give `[C_out, T]`.
pub fn dilated_causal_conv1d(tape: &mut Tape, x: Var, w: Var, dilation: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(crate::MpgatError::Dimension(format!(
            "dilated_causal_conv1d expects [C_in, T], got {shape:?}"
        )));
    }
    let xt = tape.transpose(x)?;
    let xt = tape.reshape(xt, [1, shape[1], shape[0]])?;
    let y = tape.causal_conv(xt, w, dilation)?;
    let c_out = tape.shape(y)[2];
    let y = tape.reshape(y, [shape[1], c_out])?;
    tape.transpose(y)
}
