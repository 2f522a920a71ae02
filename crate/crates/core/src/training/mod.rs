//! Moment-aware clip sampling, object-level selective supervision, and the
//! training loop over (video, expression) pairs.

mod adam;
mod losses;

pub use adam::Adam;
pub use losses::{
    dice_loss, focal_loss, mask_to_tensor, total_loss, FrameTarget, LossBreakdown, LossWeights,
    PROB_CLAMP,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BinaryMask, DatasetError, VideoSample};
use crate::encoders::{EncoderError, FeaturePyramid, FrozenEncoders, TextLayers};
use crate::memory::{
    mdp_step, Membership, MemoryConfig, PropagationError, PropagationState, StepParams,
};
use crate::moments::{moment_complement, MomentError, MomentSet};
use crate::params::{ModelConfig, ModelParams};
use crate::pipeline::{forward_features, work_grid, PipelineError};
use crate::seeds;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("clip length must be an even number >= 2 and at most the video length, got {got} for T_V={t_v}")]
    BadClipLength { got: usize, t_v: usize },
    #[error("cannot sample a clip from an empty relevant set")]
    EmptyMplus,
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
    #[error("clip must contain at least one frame")]
    EmptyClip,
    #[error("object {object} has no mask for frame {frame}")]
    MissingMask { object: String, frame: usize },
    #[error("dataset has no (video, expression) pairs to train on")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// A sampled training clip: sorted frame indices plus per-frame routing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipSample {
    pub frames: Vec<usize>,
    pub membership: Vec<Membership>,
}

impl ClipSample {
    fn from_frames(mut frames: Vec<usize>, mplus: &MomentSet) -> Self {
        frames.sort_unstable();
        let membership = frames
            .iter()
            .map(|&f| {
                if mplus.contains(f) {
                    Membership::Relevant
                } else {
                    Membership::Irrelevant
                }
            })
            .collect();
        ClipSample { frames, membership }
    }

    pub fn relevant_count(&self) -> usize {
        self.membership
            .iter()
            .filter(|m| **m == Membership::Relevant)
            .count()
    }
}

fn draw_without_replacement(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool = pool.to_vec();
    let k = k.min(pool.len());
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Sample a training clip with half of the frames forced into the relevant
/// set. When the relevant set is smaller than half the clip, it is drawn with
/// replacement, deduplicated, and padded from the full frame range.
pub fn sample_clip(
    mplus: &MomentSet,
    mminus: &MomentSet,
    clip_length: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClipSample, TrainError> {
    let t_v = mplus.video_length();
    if clip_length < 2 || clip_length % 2 != 0 || clip_length > t_v {
        return Err(TrainError::BadClipLength {
            got: clip_length,
            t_v,
        });
    }
    if mplus.is_empty() {
        return Err(TrainError::EmptyMplus);
    }
    debug_assert_eq!(mminus.video_length(), t_v);

    let half = clip_length / 2;
    let mut chosen: Vec<usize> = if mplus.len() >= half {
        draw_without_replacement(mplus.indices(), half, rng)
    } else {
        // the whole relevant set (the dedup limit of with-replacement draws),
        // padded from the remaining frames
        let mut drawn: Vec<usize> = mplus.indices().to_vec();
        let mut pool: Vec<usize> = (1..=t_v).filter(|f| !drawn.contains(f)).collect();
        while drawn.len() < half {
            let j = rng.gen_range(0..pool.len());
            drawn.push(pool.swap_remove(j));
        }
        drawn
    };

    let pool: Vec<usize> = (1..=t_v).filter(|f| !chosen.contains(f)).collect();
    chosen.extend(draw_without_replacement(&pool, clip_length - chosen.len(), rng));
    Ok(ClipSample::from_frames(chosen, mplus))
}

/// Uniform clip over all frames, the non-moment-aware baseline.
pub fn random_clip(
    mplus: &MomentSet,
    clip_length: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClipSample, TrainError> {
    let t_v = mplus.video_length();
    if clip_length < 2 || clip_length % 2 != 0 || clip_length > t_v {
        return Err(TrainError::BadClipLength {
            got: clip_length,
            t_v,
        });
    }
    let all: Vec<usize> = (1..=t_v).collect();
    let frames = draw_without_replacement(&all, clip_length, rng);
    Ok(ClipSample::from_frames(frames, mplus))
}

/// Supervision masks for one clip after object-level filtering.
#[derive(Clone, Debug)]
pub struct SupervisionTarget {
    pub retained_objects: BTreeSet<String>,
    /// Per clip frame (clip order): pixelwise OR over retained objects.
    pub frame_targets: Vec<BinaryMask>,
    /// Per clip frame: pixels of discarded objects, present only in ignore
    /// mode.
    pub ignore: Option<Vec<BinaryMask>>,
}

fn or_masks(
    ids: &BTreeSet<String>,
    masks: &BTreeMap<String, &[BinaryMask]>,
    clip: &[usize],
    h: usize,
    w: usize,
) -> Result<Vec<BinaryMask>, TrainError> {
    let mut out = Vec::with_capacity(clip.len());
    for &frame in clip {
        let mut target = BinaryMask::zeros(h, w);
        for id in ids {
            let object_masks = masks[id];
            let mask = object_masks
                .get(frame - 1)
                .ok_or_else(|| TrainError::MissingMask {
                    object: id.clone(),
                    frame,
                })?;
            for (o, &m) in target.pixels.iter_mut().zip(&mask.pixels) {
                *o |= m;
            }
        }
        out.push(target);
    }
    Ok(out)
}

/// Keep only objects whose moment intersects the clip; the per-frame target
/// is the union of the retained objects' masks. With `ignore_mode`, the
/// discarded objects' pixels become don't-care regions instead of background.
pub fn oss_filter(
    masks: &BTreeMap<String, &[BinaryMask]>,
    moments: &BTreeMap<String, MomentSet>,
    clip: &[usize],
    h: usize,
    w: usize,
    ignore_mode: bool,
) -> Result<SupervisionTarget, TrainError> {
    let retained: BTreeSet<String> = moments
        .iter()
        .filter(|(_, m)| clip.iter().any(|f| m.contains(*f)))
        .map(|(id, _)| id.clone())
        .collect();
    let frame_targets = or_masks(&retained, masks, clip, h, w)?;
    let ignore = if ignore_mode {
        let discarded: BTreeSet<String> = masks
            .keys()
            .filter(|id| !retained.contains(*id))
            .cloned()
            .collect();
        Some(or_masks(&discarded, masks, clip, h, w)?)
    } else {
        None
    };
    Ok(SupervisionTarget {
        retained_objects: retained,
        frame_targets,
        ignore,
    })
}

/// OSS disabled: every referred object is supervised regardless of overlap.
pub fn supervise_all(
    masks: &BTreeMap<String, &[BinaryMask]>,
    clip: &[usize],
    h: usize,
    w: usize,
) -> Result<SupervisionTarget, TrainError> {
    let retained: BTreeSet<String> = masks.keys().cloned().collect();
    let frame_targets = or_masks(&retained, masks, clip, h, w)?;
    Ok(SupervisionTarget {
        retained_objects: retained,
        frame_targets,
        ignore: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_moment_sampling: bool,
    pub use_mdp: bool,
    pub use_oss: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_moment_sampling: true,
            use_mdp: true,
            use_oss: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub clip_length: usize,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub oss_ignore_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clip_length: 8,
            epochs: 2,
            lr: 1e-2,
            weights: LossWeights::default(),
            ablation: AblationFlags::default(),
            oss_ignore_mode: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub total: f64,
    pub dice: f64,
    pub focal: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: Adam,
    pub curve: Vec<LossRow>,
    pub steps: u64,
}

/// Optimizer/parameter state to continue a run from.
pub struct ResumeState {
    pub params: ModelParams,
    pub optimizer: Adam,
    pub next_step: u64,
}

/// Per-expression replacement moments (e.g. retrieved instead of annotated),
/// keyed by (video index, expression index).
pub type MomentOverrides = BTreeMap<(usize, usize), MomentSet>;

struct FeatureCache<'a> {
    encoders: &'a FrozenEncoders,
    pyramids: HashMap<usize, FeaturePyramid>,
    texts: HashMap<(usize, usize), TextLayers>,
}

impl<'a> FeatureCache<'a> {
    fn new(encoders: &'a FrozenEncoders) -> Self {
        FeatureCache {
            encoders,
            pyramids: HashMap::new(),
            texts: HashMap::new(),
        }
    }

    fn pyramid(&mut self, vi: usize, sample: &VideoSample) -> Result<&FeaturePyramid, TrainError> {
        if !self.pyramids.contains_key(&vi) {
            let pyr = self
                .encoders
                .encode_video(&sample.frames, sample.h, sample.w)?;
            self.pyramids.insert(vi, pyr);
        }
        Ok(&self.pyramids[&vi])
    }

    fn text(&mut self, key: (usize, usize), sample: &VideoSample) -> Result<&TextLayers, TrainError> {
        if !self.texts.contains_key(&key) {
            let layers = self
                .encoders
                .encode_text(&sample.expressions[key.1].tokens)?;
            self.texts.insert(key, layers);
        }
        Ok(&self.texts[&key])
    }
}

fn epoch_order(items: &[(usize, usize)], seed: u64, epoch: u64) -> Vec<(usize, usize)> {
    let mut order = items.to_vec();
    let mut rng = seeds::rng_for(seed, "epoch", epoch);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Train adapter, decoder, and memory projections with Adam; encoders stay
/// frozen. Deterministic in (dataset, configs, seed): every random draw is
/// derived from the seed and the step counter, so a resumed run replays the
/// unbroken run exactly.
#[allow(clippy::too_many_arguments)]
pub fn train(
    samples: &[VideoSample],
    encoders: &FrozenEncoders,
    model_cfg: &ModelConfig,
    memory_cfg: &MemoryConfig,
    cfg: &TrainConfig,
    seed: u64,
    moment_overrides: Option<&MomentOverrides>,
    resume: Option<ResumeState>,
) -> Result<TrainOutcome, TrainError> {
    cfg.weights.validate()?;
    let items: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(vi, s)| (0..s.expressions.len()).map(move |ei| (vi, ei)))
        .collect();
    if items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let (mut params, mut optimizer, start_step) = match resume {
        Some(r) => (r.params, r.optimizer, r.next_step),
        None => (
            ModelParams::init(model_cfg, &encoders.config, seeds::derive_seed(seed, "init", 0)),
            Adam::new(cfg.lr),
            0,
        ),
    };
    optimizer.lr = cfg.lr;

    let steps_per_epoch = items.len() as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut cache = FeatureCache::new(encoders);
    let mut curve = Vec::new();
    let mut current_epoch = u64::MAX;
    let mut order: Vec<(usize, usize)> = Vec::new();

    for step in start_step..total_steps {
        let epoch = step / steps_per_epoch;
        if epoch != current_epoch {
            order = epoch_order(&items, seed, epoch);
            current_epoch = epoch;
        }
        let (vi, ei) = order[(step % steps_per_epoch) as usize];
        let sample = &samples[vi];
        let expression = &sample.expressions[ei];

        let mplus = match moment_overrides.and_then(|m| m.get(&(vi, ei))) {
            Some(set) => set.clone(),
            None => sample.expression_mplus(expression)?,
        };
        if mplus.is_empty() {
            return Err(TrainError::EmptyMplus);
        }
        let mminus = moment_complement(&mplus);

        let mut rng = seeds::rng_for(seed, "clip", step);
        let mut clip = if cfg.ablation.use_moment_sampling {
            sample_clip(&mplus, &mminus, cfg.clip_length.min(sample.t_v & !1), &mut rng)?
        } else {
            random_clip(&mplus, cfg.clip_length.min(sample.t_v & !1), &mut rng)?
        };
        if !cfg.ablation.use_mdp {
            // MDP disabled: every frame takes the text-conditioned path
            for m in &mut clip.membership {
                *m = Membership::Relevant;
            }
        }

        // supervision targets
        let mut masks: BTreeMap<String, &[BinaryMask]> = BTreeMap::new();
        let mut moments: BTreeMap<String, MomentSet> = BTreeMap::new();
        for id in &expression.referred_object_ids {
            let obj = &sample.objects[id];
            masks.insert(id.clone(), obj.masks.as_slice());
            let object_moment = match moment_overrides.and_then(|m| m.get(&(vi, ei))) {
                // retrieved moments carry no per-object structure; the
                // expression-level set stands in for each referred object
                Some(set) => set.clone(),
                None => obj.moment_set(sample.t_v)?,
            };
            moments.insert(id.clone(), object_moment);
        }
        let target = if cfg.ablation.use_oss {
            oss_filter(&masks, &moments, &clip.frames, sample.h, sample.w, cfg.oss_ignore_mode)?
        } else {
            supervise_all(&masks, &clip.frames, sample.h, sample.w)?
        };

        // forward
        let text = cache.text((vi, ei), sample)?.clone();
        let pyramid = cache.pyramid(vi, sample)?;
        let mut tape = Tape::new();
        let tracked = params.tracked(&mut tape);
        let fwd = forward_features(
            &mut tape,
            encoders,
            pyramid,
            &text,
            &clip.frames,
            &expression.verb_indices,
            &tracked,
        )?;
        let grid = work_grid(encoders, sample.h, sample.w);
        let step_params = StepParams {
            memory: &tracked.memory,
            decoder: &tracked.decoder,
            grid: &grid,
            config: memory_cfg,
        };
        let mut state = PropagationState::new(memory_cfg.capacity);
        let mut logits = Vec::with_capacity(clip.frames.len());
        for (i, (&frame, &membership)) in clip.frames.iter().zip(&clip.membership).enumerate() {
            let prompt = match membership {
                Membership::Relevant => Some(&fwd.prompt),
                Membership::Irrelevant => None,
            };
            let p = mdp_step(
                &mut tape,
                frame,
                membership,
                Some(&fwd.frames.adapter[i]),
                Some(&fwd.frames.raw[i]),
                prompt,
                &mut state,
                &step_params,
            )?;
            logits.push(p);
        }

        let frame_targets: Vec<FrameTarget> = target
            .frame_targets
            .iter()
            .enumerate()
            .map(|(i, t)| FrameTarget {
                target: t,
                ignore: target.ignore.as_ref().map(|ig| &ig[i]),
            })
            .collect();
        let loss = total_loss(&mut tape, &logits, &frame_targets, &cfg.weights)?;

        // backward + update
        let grads_by_node = tape.backward(&loss.total)?;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, tensor) in tracked.named() {
            if let Some(g) = grads_by_node.wrt(tensor) {
                grads.insert(name, g.clone());
            }
        }
        optimizer.step(&mut params, &grads);

        curve.push(LossRow {
            step,
            total: loss.total.item(),
            dice: loss.dice_value,
            focal: loss.focal_value,
        });
    }

    Ok(TrainOutcome {
        params,
        optimizer,
        curve,
        steps: total_steps,
    })
}

#[cfg(test)]
mod tests;
