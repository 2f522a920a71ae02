//! Shared forward plumbing between training and inference: encoder feature
//! extraction, the adapter pass over a set of frames, per-frame feature
//! routing inputs, and prompt construction.

use thiserror::Error;

use crate::adapter::{build_text_prompt, run_adapter_stack, AdapterError, TextPrompt};
use crate::dataset::{ExpressionRecord, VideoSample};
use crate::encoders::{extract_text_slots, EncoderError, FeaturePyramid, FrozenEncoders, TextLayers};
use crate::memory::{FrameFeatures, WorkGrid};
use crate::params::ModelParams;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Working-resolution geometry for frames of size `h` x `w` under the given
/// encoder configuration.
pub fn work_grid(encoders: &FrozenEncoders, h: usize, w: usize) -> WorkGrid {
    let div = encoders.config.spatial_divisor();
    WorkGrid {
        h_m: h / div,
        w_m: w / div,
        h,
        w,
        channels: *encoders.config.channels.last().expect("non-empty pyramid"),
    }
}

/// Selector matrix extracting the `index`-th block of `cells` rows from a
/// `[frames*cells, c]` tensor.
fn frame_selector(index: usize, frames: usize, cells: usize) -> Tensor {
    let rows = cells;
    let cols = frames * cells;
    let mut data = vec![0.0; rows * cols];
    for r in 0..cells {
        data[r * cols + index * cells + r] = 1.0;
    }
    Tensor::new(data, &[rows, cols]).expect("selector is finite")
}

/// Adapter outputs routed per frame, plus the text prompt.
pub struct ForwardFeatures {
    /// Per selected frame: text-conditioned working-level features.
    pub frames: FrameFeatures,
    pub prompt: TextPrompt,
    pub e_adp: Tensor,
}

/// Run the adapter stack over `frame_indices` (1-based video frames) of an
/// encoded video and split the outputs per frame. Raw encoder features for
/// the same frames ride along for the irrelevant-path routing.
pub fn forward_features(
    tape: &mut Tape,
    encoders: &FrozenEncoders,
    pyramid: &FeaturePyramid,
    text: &TextLayers,
    frame_indices: &[usize],
    verb_indices: &[usize],
    params: &ModelParams,
) -> Result<ForwardFeatures, PipelineError> {
    let zero_based: Vec<usize> = frame_indices.iter().map(|&f| f - 1).collect();
    let view = pyramid.select_frames(&zero_based);
    let (f_adp, e_adp) = run_adapter_stack(tape, &view, text, &params.adapter, encoders)?;

    let working = view.working();
    let cells = working.cells_per_frame();
    let t = frame_indices.len();
    let mut adapter_frames = Vec::with_capacity(t);
    let mut raw_frames = Vec::with_capacity(t);
    for i in 0..t {
        let selector = frame_selector(i, t, cells);
        adapter_frames.push(tape.matmul(&selector, &f_adp)?);
        raw_frames.push(working.frame_tensor(i));
    }

    let (e_c, e_m) = extract_text_slots(tape, &e_adp, verb_indices)?;
    let prompt = build_text_prompt(tape, &e_c, &e_m, &params.adapter.prompt_mlp)?;

    Ok(ForwardFeatures {
        frames: FrameFeatures {
            adapter: adapter_frames,
            raw: raw_frames,
        },
        prompt,
        e_adp,
    })
}

/// Encode a full video and one expression with the frozen encoders.
pub fn encode_sample(
    encoders: &FrozenEncoders,
    sample: &VideoSample,
    expression: &ExpressionRecord,
) -> Result<(FeaturePyramid, TextLayers), PipelineError> {
    let pyramid = encoders.encode_video(&sample.frames, sample.h, sample.w)?;
    let text = encoders.encode_text(&expression.tokens)?;
    Ok((pyramid, text))
}
