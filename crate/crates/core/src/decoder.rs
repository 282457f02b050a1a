//! Weighted broadcast of deformable tokens back onto mesh points.

use alloc::format;

use crate::error::{Error, Result};
use crate::nn::{ffn, layer_norm, linear, Activation};
use crate::params::ModelParams;
use crate::tape::{Tape, Var};

/// `û_i = Σ_j w_ij d̂_j`, reusing the encoder's point weights.
pub fn decode_points(tape: &mut Tape, tokens: Var, weights: Var) -> Result<Var> {
    let (ws, ts) = (tape.shape(weights), tape.shape(tokens));
    if ws.len() != 2 || ts.len() != 2 || ws[1] != ts[0] {
        return Err(Error::shape("decode_points", ws, ts));
    }
    tape.matmul(weights, tokens)
}

/// `Linear_out(FFN(LN(decoded + x^d)))`.
pub fn head_forward(tape: &mut Tape, params: &ModelParams, prefix: &str, decoded: Var, deep: Var, activation: Activation) -> Result<Var> {
    if tape.shape(decoded) != tape.shape(deep) {
        return Err(Error::shape("head_forward", tape.shape(decoded), tape.shape(deep)));
    }
    let s = tape.add(decoded, deep)?;
    let n = layer_norm(tape, params, &format!("{prefix}/norm"), s)?;
    let h = ffn(tape, params, &format!("{prefix}/ffn"), n, activation)?;
    linear(tape, params, &format!("{prefix}/out"), h)
}

pub fn decoder_prefix(solid: &str) -> alloc::string::String {
    format!("decoder/{solid}")
}
