//! Moment-centric memory bank, memory attention, mask decoding, and the
//! dual-path per-frame step.
//!
//! Routing rule: text-relevant frames query memory with adapter features and
//! decode with the text prompt, then feed the bank; text-irrelevant frames
//! query with raw encoder features, decode without a prompt, and never touch
//! the bank. The bank therefore only ever holds entries for relevant frames.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::adapter::TextPrompt;
use crate::dataset::BinaryMask;
use crate::moments::MomentSet;
use crate::params::{DecoderParams, MemoryParams};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error("frame {frame}: {membership:?} step is missing its {missing} features")]
    MembershipFeatureMismatch {
        frame: usize,
        membership: Membership,
        missing: &'static str,
    },
    #[error("frame {frame}: relevant frames must decode with a text prompt")]
    PromptMissing { frame: usize },
    #[error("frame {frame}: irrelevant frames must decode without a text prompt")]
    PromptOnIrrelevant { frame: usize },
    #[error("frame {frame}: memory entries are restricted to text-relevant frames")]
    IrrelevantMemoryInsert { frame: usize },
    #[error("frame {frame} already has a memory entry")]
    DuplicateEntry { frame: usize },
    #[error("processing order is not a permutation of 1..={expected}: {detail}")]
    NotAPermutation { expected: usize, detail: String },
    #[error("frame {frame}: irrelevant frame precedes a relevant frame in the processing order")]
    IrrelevantBeforeRelevant { frame: usize },
    #[error("inference needs a non-empty relevant set")]
    EmptyMoments,
    #[error("resolution mismatch: {detail}")]
    GridMismatch { detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Membership {
    Relevant,
    Irrelevant,
}

/// Which feature stream a step queried memory with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    Adapter,
    Raw,
}

/// Working-resolution geometry shared by memory and the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkGrid {
    pub h_m: usize,
    pub w_m: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

impl WorkGrid {
    pub fn cells(&self) -> usize {
        self.h_m * self.w_m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryConfig {
    /// Maximum number of bank entries; the entry farthest from the current
    /// frame is evicted first (ties evict the earlier frame).
    pub capacity: usize,
    /// Memory attention window: number of nearest entries attended to.
    pub attend_k: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            capacity: 8,
            attend_k: 6,
        }
    }
}

/// Fused (feature, soft-mask) record of one text-relevant frame.
#[derive(Clone, Debug)]
pub struct MemoryEntry {
    pub frame_index: usize,
    pub fused: Tensor,
    pub is_relevant: bool,
}

/// Ordered, deduplicated store of [`MemoryEntry`] values.
#[derive(Clone, Debug, Default)]
pub struct MemoryBank {
    entries: Vec<MemoryEntry>,
    capacity: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank {
            entries: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Insert an entry, evicting the entry farthest from `current_frame`
    /// when at capacity.
    pub fn insert(&mut self, entry: MemoryEntry, current_frame: usize) -> Result<(), PropagationError> {
        if !entry.is_relevant {
            return Err(PropagationError::IrrelevantMemoryInsert {
                frame: entry.frame_index,
            });
        }
        if self.entries.iter().any(|e| e.frame_index == entry.frame_index) {
            return Err(PropagationError::DuplicateEntry {
                frame: entry.frame_index,
            });
        }
        if self.capacity > 0 && self.entries.len() == self.capacity {
            let evict = self
                .entries
                .iter()
                .enumerate()
                .max_by_key(|(_, e)| (e.frame_index.abs_diff(current_frame), std::cmp::Reverse(e.frame_index)))
                .map(|(i, _)| i)
                .expect("bank is non-empty at capacity");
            self.entries.remove(evict);
        }
        let pos = self
            .entries
            .partition_point(|e| e.frame_index < entry.frame_index);
        self.entries.insert(pos, entry);
        Ok(())
    }

    /// Indices (into `entries`) of the `k` entries nearest to frame `t`,
    /// ties toward the smaller frame index, returned in temporal order.
    pub fn nearest(&self, t: usize, k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by_key(|&i| (self.entries[i].frame_index.abs_diff(t), self.entries[i].frame_index));
        order.truncate(k);
        order.sort_by_key(|&i| self.entries[i].frame_index);
        order
    }
}

/// Decoded state of one propagation run plus the instrumentation trace.
#[derive(Debug, Default)]
pub struct PropagationState {
    pub bank: MemoryBank,
    pub decoded: BTreeMap<usize, Tensor>,
    pub trace: Vec<StepTrace>,
}

impl PropagationState {
    pub fn new(capacity: usize) -> Self {
        PropagationState {
            bank: MemoryBank::new(capacity),
            decoded: BTreeMap::new(),
            trace: Vec::new(),
        }
    }
}

/// Instrumentation record of a single [`mdp_step`].
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub frame: usize,
    pub membership: Membership,
    pub used_prompt: bool,
    pub query: QuerySource,
    pub attended_frames: Vec<usize>,
    pub bank_after: Vec<usize>,
}

/// Block-average pooling matrix `[h_m*w_m, h*w]`.
pub(crate) fn downsample_matrix(grid: &WorkGrid) -> Tensor {
    let (bh, bw) = (grid.h / grid.h_m, grid.w / grid.w_m);
    let rows = grid.cells();
    let cols = grid.h * grid.w;
    let weight = 1.0 / (bh * bw) as f64;
    let mut data = vec![0.0; rows * cols];
    for cy in 0..grid.h_m {
        for cx in 0..grid.w_m {
            let row = cy * grid.w_m + cx;
            for dy in 0..bh {
                for dx in 0..bw {
                    let col = (cy * bh + dy) * grid.w + cx * bw + dx;
                    data[row * cols + col] = weight;
                }
            }
        }
    }
    Tensor::new(data, &[rows, cols]).expect("pool matrix is finite")
}

/// Bilinear (align-corners) interpolation matrix `[h*w, h_m*w_m]`.
pub(crate) fn upsample_matrix(grid: &WorkGrid) -> Tensor {
    let rows = grid.h * grid.w;
    let cols = grid.cells();
    let mut data = vec![0.0; rows * cols];
    let fpos = |out: usize, n_out: usize, n_in: usize| -> f64 {
        if n_out <= 1 || n_in <= 1 {
            0.0
        } else {
            out as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    for y in 0..grid.h {
        let fy = fpos(y, grid.h, grid.h_m);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(grid.h_m - 1);
        let dy = fy - y0 as f64;
        for x in 0..grid.w {
            let fx = fpos(x, grid.w, grid.w_m);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(grid.w_m - 1);
            let dx = fx - x0 as f64;
            let row = y * grid.w + x;
            let mut put = |cy: usize, cx: usize, w: f64| {
                data[row * cols + cy * grid.w_m + cx] += w;
            };
            put(y0, x0, (1.0 - dy) * (1.0 - dx));
            put(y0, x1, (1.0 - dy) * dx);
            put(y1, x0, dy * (1.0 - dx));
            put(y1, x1, dy * dx);
        }
    }
    Tensor::new(data, &[rows, cols]).expect("upsample matrix is finite")
}

/// Fuse working-level features with the sigmoid-squashed, block-pooled soft
/// mask into a memory entry.
pub fn memory_encode(
    tape: &mut Tape,
    features: &Tensor,
    soft_mask: &Tensor,
    frame_index: usize,
    relevant: bool,
    params: &MemoryParams,
    grid: &WorkGrid,
) -> Result<MemoryEntry, PropagationError> {
    if !relevant {
        return Err(PropagationError::IrrelevantMemoryInsert { frame: frame_index });
    }
    if features.shape() != [grid.cells(), grid.channels] {
        return Err(PropagationError::GridMismatch {
            detail: format!(
                "features shaped {:?}, expected [{}, {}]",
                features.shape(),
                grid.cells(),
                grid.channels
            ),
        });
    }
    if soft_mask.shape() != [grid.h, grid.w] {
        return Err(PropagationError::GridMismatch {
            detail: format!(
                "soft mask shaped {:?}, expected [{}, {}]",
                soft_mask.shape(),
                grid.h,
                grid.w
            ),
        });
    }
    let flat = tape.reshape(soft_mask, &[grid.h * grid.w, 1])?;
    let squashed = tape.sigmoid(&flat)?;
    let pooled = tape.matmul(&downsample_matrix(grid), &squashed)?;
    let stacked = tape.concat(&[features, &pooled], 1)?;
    let fused = tape.matmul(&stacked, &params.w_fuse)?;
    Ok(MemoryEntry {
        frame_index,
        fused,
        is_relevant: true,
    })
}

/// Cross-attention from query cells to the cells of the nearest bank entries,
/// with a residual add. An empty bank passes the query through unchanged.
/// Returns the attended features and the frames that were attended to.
pub fn memory_attend(
    tape: &mut Tape,
    query: &Tensor,
    bank: &MemoryBank,
    t: usize,
    params: &MemoryParams,
    attend_k: usize,
) -> Result<(Tensor, Vec<usize>), PropagationError> {
    if bank.is_empty() {
        return Ok((query.clone(), Vec::new()));
    }
    let selected = bank.nearest(t, attend_k);
    let attended: Vec<usize> = selected.iter().map(|&i| bank.entries()[i].frame_index).collect();
    let pieces: Vec<&Tensor> = selected.iter().map(|&i| &bank.entries()[i].fused).collect();
    let memory = tape.concat(&pieces, 0)?;
    let c = query.shape()[1];
    let q = tape.matmul(query, &params.w_q)?;
    let k = tape.matmul(&memory, &params.w_k)?;
    let v = tape.matmul(&memory, &params.w_v)?;
    let kt = tape.transpose(&k)?;
    let scores = tape.matmul(&q, &kt)?;
    let scaled = tape.scalar_mul(&scores, &Tensor::scalar(1.0 / (c as f64).sqrt()))?;
    let weights = tape.softmax(&scaled, 1)?;
    let readout = tape.matmul(&weights, &v)?;
    let out = tape.add(query, &readout)?;
    Ok((out, attended))
}

/// Decode a soft mask from memory-attended features. With a prompt, the
/// prompt token cross-attends to the feature cells; without one, a learned
/// mask token plays the same role. Per-cell inner products with the updated
/// token give cell logits, bilinearly upsampled to the full frame.
pub fn decode_mask(
    tape: &mut Tape,
    f_mem: &Tensor,
    prompt: Option<&TextPrompt>,
    params: &DecoderParams,
    grid: &WorkGrid,
) -> Result<Tensor, PropagationError> {
    if f_mem.shape() != [grid.cells(), grid.channels] {
        return Err(PropagationError::GridMismatch {
            detail: format!(
                "decoder input shaped {:?}, expected [{}, {}]",
                f_mem.shape(),
                grid.cells(),
                grid.channels
            ),
        });
    }
    let token = match prompt {
        Some(p) => tape.matmul(&p.rho, &params.w_prompt_in)?,
        None => params.mask_token.clone(),
    };
    let c = grid.channels;
    let scale = Tensor::scalar(1.0 / (c as f64).sqrt());
    let q = tape.matmul(&token, &params.w_q)?;
    let k = tape.matmul(f_mem, &params.w_k)?;
    let v = tape.matmul(f_mem, &params.w_v)?;
    let kt = tape.transpose(&k)?;
    let scores = tape.matmul(&q, &kt)?;
    let scaled = tape.scalar_mul(&scores, &scale)?;
    let weights = tape.softmax(&scaled, 1)?;
    let readout = tape.matmul(&weights, &v)?;
    let token = tape.add(&token, &readout)?;
    let token_col = tape.transpose(&token)?;
    let logits = tape.matmul(f_mem, &token_col)?;
    let up = tape.matmul(&upsample_matrix(grid), &logits)?;
    Ok(tape.reshape(&up, &[grid.h, grid.w])?)
}

/// Strict thresholding of logits at zero.
pub fn binarize(p: &Tensor) -> BinaryMask {
    let shape = p.shape();
    let (h, w) = (shape[0], shape[1]);
    let pixels = p.data().iter().map(|&v| if v > 0.0 { 1u8 } else { 0u8 }).collect();
    BinaryMask::new(h, w, pixels).expect("logit grid maps onto a mask")
}

/// Parameter bundle for one propagation step.
pub struct StepParams<'a> {
    pub memory: &'a MemoryParams,
    pub decoder: &'a DecoderParams,
    pub grid: &'a WorkGrid,
    pub config: &'a MemoryConfig,
}

/// One dual-path step: route by membership, decode, and (for relevant
/// frames) update the bank. Returns the soft mask logits.
#[allow(clippy::too_many_arguments)]
pub fn mdp_step(
    tape: &mut Tape,
    t: usize,
    membership: Membership,
    f_adp_t: Option<&Tensor>,
    f_sam_t: Option<&Tensor>,
    prompt: Option<&TextPrompt>,
    state: &mut PropagationState,
    params: &StepParams,
) -> Result<Tensor, PropagationError> {
    let (p, used_prompt, query_source, attended) = match membership {
        Membership::Relevant => {
            let f_adp = f_adp_t.ok_or(PropagationError::MembershipFeatureMismatch {
                frame: t,
                membership,
                missing: "adapter",
            })?;
            let prompt = prompt.ok_or(PropagationError::PromptMissing { frame: t })?;
            let (f_mem, attended) =
                memory_attend(tape, f_adp, &state.bank, t, params.memory, params.config.attend_k)?;
            let p = decode_mask(tape, &f_mem, Some(prompt), params.decoder, params.grid)?;
            let entry = memory_encode(tape, f_adp, &p, t, true, params.memory, params.grid)?;
            state.bank.insert(entry, t)?;
            (p, true, QuerySource::Adapter, attended)
        }
        Membership::Irrelevant => {
            if prompt.is_some() {
                return Err(PropagationError::PromptOnIrrelevant { frame: t });
            }
            let f_sam = f_sam_t.ok_or(PropagationError::MembershipFeatureMismatch {
                frame: t,
                membership,
                missing: "raw encoder",
            })?;
            let (f_mem, attended) =
                memory_attend(tape, f_sam, &state.bank, t, params.memory, params.config.attend_k)?;
            let p = decode_mask(tape, &f_mem, None, params.decoder, params.grid)?;
            (p, false, QuerySource::Raw, attended)
        }
    };
    state.decoded.insert(t, p.clone());
    state.trace.push(StepTrace {
        frame: t,
        membership,
        used_prompt,
        query: query_source,
        attended_frames: attended,
        bank_after: state.bank.frames(),
    });
    Ok(p)
}

/// Per-frame feature streams at the working resolution.
pub struct FrameFeatures {
    /// Text-conditioned features per frame, `[cells, C]`.
    pub adapter: Vec<Tensor>,
    /// Raw encoder features per frame, `[cells, C]`.
    pub raw: Vec<Tensor>,
}

#[derive(Debug)]
pub struct InferenceOutput {
    /// Binarized masks in temporal order (frame 1 first).
    pub masks: Vec<BinaryMask>,
    pub state: PropagationState,
}

/// Irrelevant frames ordered by ascending distance to the nearest relevant
/// frame, ties toward earlier frames.
pub fn propagation_order(mplus: &MomentSet) -> Vec<usize> {
    let mut frames: Vec<usize> = (1..=mplus.video_length())
        .filter(|&f| !mplus.contains(f))
        .collect();
    frames.sort_by_key(|&f| (mplus.distance_to(f).unwrap_or(0), f));
    frames
}

/// Two-pass inference: relevant frames first (in the order given), then
/// irrelevant frames by ascending distance to the relevant set.
#[allow(clippy::too_many_arguments)]
pub fn run_inference(
    tape: &mut Tape,
    feats: &FrameFeatures,
    prompt: &TextPrompt,
    mplus: &MomentSet,
    order: &[usize],
    params: &StepParams,
) -> Result<InferenceOutput, PropagationError> {
    let t_v = mplus.video_length();
    if mplus.is_empty() {
        return Err(PropagationError::EmptyMoments);
    }
    if feats.adapter.len() != t_v || feats.raw.len() != t_v {
        return Err(PropagationError::GridMismatch {
            detail: format!(
                "feature streams cover {}/{} frames, expected {t_v}",
                feats.adapter.len(),
                feats.raw.len()
            ),
        });
    }
    if order.len() != t_v {
        return Err(PropagationError::NotAPermutation {
            expected: t_v,
            detail: format!("order has {} entries", order.len()),
        });
    }
    let mut seen = vec![false; t_v + 1];
    for &f in order {
        if f < 1 || f > t_v || seen[f] {
            return Err(PropagationError::NotAPermutation {
                expected: t_v,
                detail: format!("frame {f} repeated or out of range"),
            });
        }
        seen[f] = true;
    }
    let mut in_tail = false;
    for &f in order {
        if mplus.contains(f) {
            if in_tail {
                return Err(PropagationError::IrrelevantBeforeRelevant { frame: f });
            }
        } else {
            in_tail = true;
        }
    }

    let mut state = PropagationState::new(params.config.capacity);
    for &f in order.iter().filter(|&&f| mplus.contains(f)) {
        mdp_step(
            tape,
            f,
            Membership::Relevant,
            Some(&feats.adapter[f - 1]),
            None,
            Some(prompt),
            &mut state,
            params,
        )?;
    }
    for f in propagation_order(mplus) {
        mdp_step(
            tape,
            f,
            Membership::Irrelevant,
            None,
            Some(&feats.raw[f - 1]),
            None,
            &mut state,
            params,
        )?;
    }

    let masks = (1..=t_v)
        .map(|f| binarize(state.decoded.get(&f).expect("all frames decoded")))
        .collect();
    Ok(InferenceOutput { masks, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::params::{ModelConfig, ModelParams};
    use crate::seeds;
    use rand::Rng;

    fn grid() -> WorkGrid {
        WorkGrid {
            h_m: 2,
            w_m: 2,
            h: 8,
            w: 8,
            channels: 6,
        }
    }

    fn test_params(seed: u64) -> ModelParams {
        let encoder = EncoderConfig {
            text_dim: 8,
            channels: vec![4, 5, 6],
            patch: 2,
            image_channels: 3,
            vocab_size: 16,
            seed: 1,
        };
        let mut params = ModelParams::init(
            &ModelConfig {
                adapter_width: 4,
                prompt_dim: 8,
            },
            &encoder,
            seed,
        );
        let mut rng = seeds::rng(seed ^ 0xfeed);
        for (_, t) in params.named_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.4..0.4);
            }
        }
        params
    }

    fn rand_features(grid: &WorkGrid, seed: u64) -> Tensor {
        let mut rng = seeds::rng(seed);
        let data = (0..grid.cells() * grid.channels)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::new(data, &[grid.cells(), grid.channels]).unwrap()
    }

    fn prompt_from(params: &ModelParams, seed: u64) -> TextPrompt {
        let d_p = params.decoder.w_prompt_in.shape()[0];
        let mut rng = seeds::rng(seed);
        let rho = Tensor::new(
            (0..d_p).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[1, d_p],
        )
        .unwrap();
        TextPrompt { rho }
    }

    fn encode_entry(
        tape: &mut Tape,
        params: &ModelParams,
        grid: &WorkGrid,
        frame: usize,
        feat_seed: u64,
    ) -> MemoryEntry {
        let features = rand_features(grid, feat_seed);
        let mask = Tensor::zeros(&[grid.h, grid.w]);
        memory_encode(tape, &features, &mask, frame, true, &params.memory, grid).unwrap()
    }

    #[test]
    fn empty_bank_passes_query_through() {
        let params = test_params(1);
        let g = grid();
        let query = rand_features(&g, 9);
        let mut tape = Tape::new();
        let bank = MemoryBank::new(8);
        let (out, attended) = memory_attend(&mut tape, &query, &bank, 3, &params.memory, 6).unwrap();
        assert_eq!(out.data(), query.data());
        assert!(attended.is_empty());
    }

    #[test]
    fn nearest_selection_matches_bruteforce_tiebreak() {
        let params = test_params(2);
        let g = grid();
        let mut tape = Tape::new();
        let mut bank = MemoryBank::new(16);
        for frame in 1..=8 {
            let entry = encode_entry(&mut tape, &params, &g, frame, frame as u64);
            bank.insert(entry, frame).unwrap();
        }
        let query = rand_features(&g, 100);
        let (_, attended) = memory_attend(&mut tape, &query, &bank, 5, &params.memory, 6).unwrap();
        assert_eq!(attended, vec![2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn uniform_memory_is_a_fixed_point_of_attention() {
        // One entry whose cells all equal the query's constant cell value and
        // an identity value projection: the convex combination returns that
        // cell, so the residual output is exactly twice the query.
        let mut params = test_params(3);
        let g = grid();
        let c = g.channels;
        {
            let eye = params.memory.w_v.data_mut();
            for v in eye.iter_mut() {
                *v = 0.0;
            }
            for i in 0..c {
                eye[i * c + i] = 1.0;
            }
        }
        let cell: Vec<f64> = (0..c).map(|i| 0.3 + 0.1 * i as f64).collect();
        let mut data = Vec::new();
        for _ in 0..g.cells() {
            data.extend_from_slice(&cell);
        }
        let query = Tensor::new(data.clone(), &[g.cells(), c]).unwrap();
        let fused = Tensor::new(data, &[g.cells(), c]).unwrap();
        let mut bank = MemoryBank::new(4);
        bank.insert(
            MemoryEntry {
                frame_index: 1,
                fused,
                is_relevant: true,
            },
            1,
        )
        .unwrap();
        let mut tape = Tape::new();
        let (out, _) = memory_attend(&mut tape, &query, &bank, 2, &params.memory, 6).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            let expect = 2.0 * query.data()[i];
            assert!((v - expect).abs() < 1e-12, "cell {i}: {v} vs {expect}");
        }
    }

    #[test]
    fn memory_encode_matches_loop_oracle() {
        let params = test_params(4);
        let g = grid();
        let features = rand_features(&g, 11);
        let mut rng = seeds::rng(12);
        let mask = Tensor::new(
            (0..g.h * g.w).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            &[g.h, g.w],
        )
        .unwrap();
        let mut tape = Tape::new();
        let entry = memory_encode(&mut tape, &features, &mask, 1, true, &params.memory, &g).unwrap();

        // straight-line reference
        let (bh, bw) = (g.h / g.h_m, g.w / g.w_m);
        let c = g.channels;
        let fuse = params.memory.w_fuse.data();
        for cell in 0..g.cells() {
            let (cy, cx) = (cell / g.w_m, cell % g.w_m);
            let mut pooled = 0.0;
            for dy in 0..bh {
                for dx in 0..bw {
                    let v = mask.data()[(cy * bh + dy) * g.w + cx * bw + dx];
                    pooled += 1.0 / (1.0 + (-v).exp());
                }
            }
            pooled /= (bh * bw) as f64;
            for j in 0..c {
                let mut s = 0.0;
                for i in 0..c {
                    s += features.data()[cell * c + i] * fuse[i * c + j];
                }
                s += pooled * fuse[c * c + j];
                let got = entry.fused.data()[cell * c + j];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strongly_negative_mask_contributes_zero_channel() {
        let params = test_params(5);
        let g = grid();
        let features = rand_features(&g, 21);
        let negative = Tensor::filled(&[g.h, g.w], -1e6); // sigmoid underflows to exactly 0
        let mut tape = Tape::new();
        let entry =
            memory_encode(&mut tape, &features, &negative, 2, true, &params.memory, &g).unwrap();
        // reference: projection of features with a zero mask channel
        let c = g.channels;
        let fuse = params.memory.w_fuse.data();
        for cell in 0..g.cells() {
            for j in 0..c {
                let mut s = 0.0;
                for i in 0..c {
                    s += features.data()[cell * c + i] * fuse[i * c + j];
                }
                assert_eq!(entry.fused.data()[cell * c + j], s);
            }
        }
    }

    #[test]
    fn identical_inputs_encode_identically() {
        let params = test_params(6);
        let g = grid();
        let features = rand_features(&g, 31);
        let mask = Tensor::filled(&[g.h, g.w], 0.25);
        let mut tape = Tape::new();
        let a = memory_encode(&mut tape, &features, &mask, 1, true, &params.memory, &g).unwrap();
        let b = memory_encode(&mut tape, &features, &mask, 1, true, &params.memory, &g).unwrap();
        assert_eq!(a.fused.data(), b.fused.data());
    }

    #[test]
    fn irrelevant_encode_is_rejected() {
        let params = test_params(7);
        let g = grid();
        let features = rand_features(&g, 41);
        let mask = Tensor::zeros(&[g.h, g.w]);
        let mut tape = Tape::new();
        let err =
            memory_encode(&mut tape, &features, &mask, 4, false, &params.memory, &g).unwrap_err();
        assert!(matches!(err, PropagationError::IrrelevantMemoryInsert { frame: 4 }));
    }

    #[test]
    fn zero_decoder_on_zero_features_gives_zero_logits() {
        let mut params = test_params(8);
        for (name, t) in params.named_mut() {
            if name.starts_with("decoder.") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let g = grid();
        let f = Tensor::zeros(&[g.cells(), g.channels]);
        let mut tape = Tape::new();
        let p = decode_mask(&mut tape, &f, None, &params.decoder, &g).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.shape(), &[8, 8]);
    }

    #[test]
    fn decode_output_shape_is_frame_sized() {
        let params = test_params(9);
        let g = grid();
        let f = rand_features(&g, 55);
        let mut tape = Tape::new();
        let p = decode_mask(&mut tape, &f, None, &params.decoder, &g).unwrap();
        assert_eq!(p.shape(), &[g.h, g.w]);
    }

    #[test]
    fn prompt_and_promptless_decodes_differ() {
        let params = test_params(10);
        let g = grid();
        let f = rand_features(&g, 65);
        let prompt = prompt_from(&params, 66);
        let mut tape = Tape::new();
        let with = decode_mask(&mut tape, &f, Some(&prompt), &params.decoder, &g).unwrap();
        let without = decode_mask(&mut tape, &f, None, &params.decoder, &g).unwrap();
        assert_ne!(with.data(), without.data());
    }

    #[test]
    fn binarize_is_strict_at_zero() {
        let zero = Tensor::zeros(&[2, 2]);
        assert!(binarize(&zero).is_empty_mask());
        let p = Tensor::new(vec![-1.0, 2.0], &[1, 2]).unwrap();
        assert_eq!(binarize(&p).pixels, vec![0, 1]);
    }

    #[test]
    fn binarize_matches_elementwise_oracle() {
        let mut rng = seeds::rng(77);
        let data: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = Tensor::new(data.clone(), &[6, 8]).unwrap();
        let mask = binarize(&p);
        for (i, &v) in data.iter().enumerate() {
            assert_eq!(mask.pixels[i], u8::from(v > 0.0));
        }
    }

    fn step_params<'a>(
        params: &'a ModelParams,
        grid: &'a WorkGrid,
        cfg: &'a MemoryConfig,
    ) -> StepParams<'a> {
        StepParams {
            memory: &params.memory,
            decoder: &params.decoder,
            grid,
            config: cfg,
        }
    }

    #[test]
    fn irrelevant_step_leaves_bank_empty() {
        let params = test_params(11);
        let g = grid();
        let cfg = MemoryConfig::default();
        let sp = step_params(&params, &g, &cfg);
        let mut tape = Tape::new();
        let mut state = PropagationState::new(cfg.capacity);
        let f_sam = rand_features(&g, 70);
        let p = mdp_step(
            &mut tape,
            1,
            Membership::Irrelevant,
            None,
            Some(&f_sam),
            None,
            &mut state,
            &sp,
        )
        .unwrap();
        assert_eq!(p.shape(), &[g.h, g.w]);
        assert!(state.bank.is_empty());
        assert_eq!(state.trace[0].query, QuerySource::Raw);
        assert!(!state.trace[0].used_prompt);
    }

    #[test]
    fn relevant_step_grows_bank_by_one() {
        let params = test_params(12);
        let g = grid();
        let cfg = MemoryConfig::default();
        let sp = step_params(&params, &g, &cfg);
        let prompt = prompt_from(&params, 71);
        let mut tape = Tape::new();
        let mut state = PropagationState::new(cfg.capacity);
        let f_adp = rand_features(&g, 72);
        mdp_step(
            &mut tape,
            3,
            Membership::Relevant,
            Some(&f_adp),
            None,
            Some(&prompt),
            &mut state,
            &sp,
        )
        .unwrap();
        assert_eq!(state.bank.frames(), vec![3]);
        assert_eq!(state.trace[0].query, QuerySource::Adapter);
        assert!(state.trace[0].used_prompt);
    }

    #[test]
    fn membership_feature_mismatch_is_rejected() {
        let params = test_params(13);
        let g = grid();
        let cfg = MemoryConfig::default();
        let sp = step_params(&params, &g, &cfg);
        let prompt = prompt_from(&params, 73);
        let mut tape = Tape::new();
        let mut state = PropagationState::new(cfg.capacity);
        let err = mdp_step(
            &mut tape,
            1,
            Membership::Relevant,
            None,
            Some(&rand_features(&g, 74)),
            Some(&prompt),
            &mut state,
            &sp,
        )
        .unwrap_err();
        assert!(matches!(err, PropagationError::MembershipFeatureMismatch { .. }));
    }

    #[test]
    fn capacity_eviction_drops_farthest_entry() {
        let params = test_params(14);
        let g = grid();
        let mut tape = Tape::new();
        let mut bank = MemoryBank::new(2);
        for (i, frame) in [1usize, 2, 8].iter().enumerate() {
            let entry = encode_entry(&mut tape, &params, &g, *frame, 80 + i as u64);
            bank.insert(entry, *frame).unwrap();
        }
        // inserting frame 8: farthest from 8 among {1,2} is 1
        assert_eq!(bank.frames(), vec![2, 8]);
    }

    fn full_inference(
        mplus_frames: &[usize],
        t_v: usize,
        seed: u64,
    ) -> (InferenceOutput, WorkGrid) {
        let params = test_params(seed);
        let g = grid();
        let cfg = MemoryConfig::default();
        let sp = step_params(&params, &g, &cfg);
        let prompt = prompt_from(&params, seed ^ 1);
        let mplus = MomentSet::new(mplus_frames.to_vec(), t_v).unwrap();
        let feats = FrameFeatures {
            adapter: (0..t_v).map(|i| rand_features(&g, 200 + i as u64)).collect(),
            raw: (0..t_v).map(|i| rand_features(&g, 300 + i as u64)).collect(),
        };
        let mut order: Vec<usize> = mplus.indices().to_vec();
        order.extend((1..=t_v).filter(|f| !mplus.contains(*f)));
        let mut tape = Tape::new();
        let out = run_inference(&mut tape, &feats, &prompt, &mplus, &order, &sp).unwrap();
        (out, g)
    }

    #[test]
    fn worked_example_routes_frame_four_promptless() {
        let (out, _) = full_inference(&[1, 2, 3, 5], 5, 15);
        assert_eq!(out.masks.len(), 5);
        for step in &out.state.trace {
            if step.frame == 4 {
                assert!(!step.used_prompt);
                assert_eq!(step.membership, Membership::Irrelevant);
                assert_eq!(step.query, QuerySource::Raw);
            }
            assert!(step.bank_after.iter().all(|f| [1, 2, 3, 5].contains(f)));
            assert!(!step.bank_after.contains(&4));
        }
    }

    #[test]
    fn full_span_mplus_needs_no_second_pass() {
        let (out, _) = full_inference(&[1, 2, 3, 4], 4, 16);
        assert!(out
            .state
            .trace
            .iter()
            .all(|s| s.membership == Membership::Relevant));
    }

    #[test]
    fn pass_two_order_is_distance_sorted() {
        let mplus = MomentSet::new(vec![3], 5).unwrap();
        assert_eq!(propagation_order(&mplus), vec![2, 4, 1, 5]);
        let (out, _) = full_inference(&[3], 5, 17);
        let processed: Vec<usize> = out
            .state
            .trace
            .iter()
            .filter(|s| s.membership == Membership::Irrelevant)
            .map(|s| s.frame)
            .collect();
        assert_eq!(processed, vec![2, 4, 1, 5]);
    }

    #[test]
    fn bad_orders_are_rejected() {
        let params = test_params(18);
        let g = grid();
        let cfg = MemoryConfig::default();
        let sp = step_params(&params, &g, &cfg);
        let prompt = prompt_from(&params, 19);
        let mplus = MomentSet::new(vec![2], 3).unwrap();
        let feats = FrameFeatures {
            adapter: (0..3).map(|i| rand_features(&g, 400 + i)).collect(),
            raw: (0..3).map(|i| rand_features(&g, 500 + i)).collect(),
        };
        let mut tape = Tape::new();
        let err = run_inference(&mut tape, &feats, &prompt, &mplus, &[2, 2, 1], &sp).unwrap_err();
        assert!(matches!(err, PropagationError::NotAPermutation { .. }));
        let err = run_inference(&mut tape, &feats, &prompt, &mplus, &[1, 2, 3], &sp).unwrap_err();
        assert!(matches!(err, PropagationError::IrrelevantBeforeRelevant { frame: 2 }));
    }

    #[test]
    fn inference_is_deterministic() {
        let a = full_inference(&[1, 4], 6, 20).0;
        let b = full_inference(&[1, 4], 6, 20).0;
        for (x, y) in a.masks.iter().zip(&b.masks) {
            assert_eq!(x.pixels, y.pixels);
        }
    }
}
