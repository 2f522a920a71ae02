//! Bidirectional cross-modal adapter and text prompt construction.
//!
//! Each level updates both modalities residually:
//!
//! ```text
//! F' = F + h(F Wdv, E Wdt) Wuv
//! E' = E + h(E Wdt, F Wdv) Wut
//! ```
//!
//! where `h` is single-head scaled dot-product cross-attention (queries from
//! the first argument) whose q/k/v projections are shared between the two
//! directions of a level. The stack runs inside the frozen encoder stream:
//! level k's outputs pass through the encoder's own pooling/projection (and
//! text mix) to become level k+1's inputs, so with zero up-projections the
//! whole stack reproduces the encoder features bit-for-bit.

use thiserror::Error;

use crate::encoders::{EncoderError, FeaturePyramid, FrozenEncoders, TextLayers};
use crate::params::{AdapterLevelParams, AdapterParams, PromptMlpParams};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter stack expects {expected} levels on both sides, got {got}")]
    LevelMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Conditioning vector for the mask decoder, shaped `[1, D_p]`.
#[derive(Clone, Debug)]
pub struct TextPrompt {
    pub rho: Tensor,
}

/// Scaled dot-product cross-attention with queries from `a` and keys/values
/// from `b`; returns the readout and the attention weights.
pub(crate) fn cross_attention(
    tape: &mut Tape,
    a: &Tensor,
    b: &Tensor,
    params: &AdapterLevelParams,
) -> Result<(Tensor, Tensor), TensorError> {
    let width = params.w_q.shape()[1];
    let q = tape.matmul(a, &params.w_q)?;
    let k = tape.matmul(b, &params.w_k)?;
    let v = tape.matmul(b, &params.w_v)?;
    let kt = tape.transpose(&k)?;
    let scores = tape.matmul(&q, &kt)?;
    let scaled = tape.scalar_mul(&scores, &Tensor::scalar(1.0 / (width as f64).sqrt()))?;
    let weights = tape.softmax(&scaled, 1)?;
    let out = tape.matmul(&weights, &v)?;
    Ok((out, weights))
}

/// One adapter level over flattened visual cells `[N_v, C_k]` and text slots
/// `[L+1, D]`.
pub fn adapter_layer(
    tape: &mut Tape,
    f: &Tensor,
    e: &Tensor,
    params: &AdapterLevelParams,
) -> Result<(Tensor, Tensor), TensorError> {
    let f_down = tape.matmul(f, &params.w_down_v)?;
    let e_down = tape.matmul(e, &params.w_down_t)?;
    let (f_att, _) = cross_attention(tape, &f_down, &e_down, params)?;
    let (e_att, _) = cross_attention(tape, &e_down, &f_down, params)?;
    let f_up = tape.matmul(&f_att, &params.w_up_v)?;
    let e_up = tape.matmul(&e_att, &params.w_up_t)?;
    let f_out = tape.add(f, &f_up)?;
    let e_out = tape.add(e, &e_up)?;
    Ok((f_out, e_out))
}

/// Run the adapter stack through the frozen encoder stream and return the
/// working-level outputs `(F_Adp, E_Adp)`.
pub fn run_adapter_stack(
    tape: &mut Tape,
    pyramid: &FeaturePyramid,
    text: &TextLayers,
    params: &AdapterParams,
    encoders: &FrozenEncoders,
) -> Result<(Tensor, Tensor), AdapterError> {
    let k = params.levels.len();
    if pyramid.levels.len() != k {
        return Err(AdapterError::LevelMismatch {
            expected: k,
            got: pyramid.levels.len(),
        });
    }
    if text.layers.len() != k {
        return Err(AdapterError::LevelMismatch {
            expected: k,
            got: text.layers.len(),
        });
    }

    let base = &pyramid.levels[0];
    let (frames, mut h, mut w) = (base.frames, base.h, base.w);
    let mut f = base.tensor().clone();
    let mut e = text.layers[0].clone();
    for (level, level_params) in params.levels.iter().enumerate() {
        let (f_adp, e_adp) = adapter_layer(tape, &f, &e, level_params)?;
        if level + 1 < k {
            let (next_f, nh, nw) = encoders.visual_transition(tape, level, frames, h, w, &f_adp)?;
            h = nh;
            w = nw;
            f = next_f;
            e = encoders.text_transition(tape, level, &e_adp)?;
        } else {
            f = f_adp;
            e = e_adp;
        }
    }
    Ok((f, e))
}

/// Build the decoder prompt from the contextual and motion embeddings:
/// concatenate, then a 2-layer MLP with relu in between.
pub fn build_text_prompt(
    tape: &mut Tape,
    e_c: &Tensor,
    e_m: &Tensor,
    mlp: &PromptMlpParams,
) -> Result<TextPrompt, TensorError> {
    let cat = tape.concat(&[e_c, e_m], 1)?;
    let pre = tape.matmul(&cat, &mlp.w1)?;
    let pre = tape.add(&pre, &mlp.b1)?;
    let hidden = tape.relu(&pre)?;
    let out = tape.matmul(&hidden, &mlp.w2)?;
    let rho = tape.add(&out, &mlp.b2)?;
    Ok(TextPrompt { rho })
}
