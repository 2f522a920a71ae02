//! Trainable parameter tensors: the cross-modal adapter stack, the memory
//! fusion/attention projections, and the mask decoder. Encoders are frozen
//! and deliberately absent from this module.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::seeds;
use crate::tensor::{Tape, Tensor};

/// Widths of the trainable heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Bottleneck width r shared by all adapter levels.
    pub adapter_width: usize,
    /// Output width of the text prompt.
    pub prompt_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            adapter_width: 16,
            prompt_dim: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdapterLevelParams {
    pub w_down_v: Tensor,
    pub w_down_t: Tensor,
    pub w_up_v: Tensor,
    pub w_up_t: Tensor,
    // shared cross-attention projections for both directions of the level
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Clone, Debug)]
pub struct PromptMlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub levels: Vec<AdapterLevelParams>,
    pub prompt_mlp: PromptMlpParams,
    pub width: usize,
    pub prompt_dim: usize,
}

#[derive(Clone, Debug)]
pub struct MemoryParams {
    /// Projects `[feature | pooled soft mask]` cells back to feature width.
    pub w_fuse: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// Maps the text prompt into feature space.
    pub w_prompt_in: Tensor,
    /// Learned token standing in for the prompt on prompt-free frames.
    pub mask_token: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub adapter: AdapterParams,
    pub memory: MemoryParams,
    pub decoder: DecoderParams,
}

fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let scale = (3.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(data, &[rows, cols]).expect("finite init")
}

/// Init for row-vector tokens where the meaningful fan-in is the width.
fn token_init(cols: usize, rng: &mut impl Rng) -> Tensor {
    let scale = (3.0 / cols as f64).sqrt();
    let data = (0..cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(data, &[1, cols]).expect("finite init")
}

impl ModelParams {
    /// Seeded initialization. Up-projections start at zero so the stack
    /// begins as the identity on the frozen encoder features.
    pub fn init(model: &ModelConfig, encoder: &EncoderConfig, seed: u64) -> Self {
        let r = model.adapter_width;
        let d = encoder.text_dim;
        let c_work = *encoder.channels.last().expect("at least one level");

        let levels = encoder
            .channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let mut rng = seeds::rng_for(seed, "adapter-level", k as u64);
                AdapterLevelParams {
                    w_down_v: uniform(c, r, &mut rng),
                    w_down_t: uniform(d, r, &mut rng),
                    w_up_v: Tensor::zeros(&[r, c]),
                    w_up_t: Tensor::zeros(&[r, d]),
                    w_q: uniform(r, r, &mut rng),
                    w_k: uniform(r, r, &mut rng),
                    w_v: uniform(r, r, &mut rng),
                }
            })
            .collect();

        let mut rng = seeds::rng_for(seed, "prompt-mlp", 0);
        let prompt_mlp = PromptMlpParams {
            w1: uniform(2 * d, 2 * d, &mut rng),
            b1: Tensor::zeros(&[1, 2 * d]),
            w2: uniform(2 * d, model.prompt_dim, &mut rng),
            b2: Tensor::zeros(&[1, model.prompt_dim]),
        };

        let mut rng = seeds::rng_for(seed, "memory", 0);
        let memory = MemoryParams {
            w_fuse: uniform(c_work + 1, c_work, &mut rng),
            w_q: uniform(c_work, c_work, &mut rng),
            w_k: uniform(c_work, c_work, &mut rng),
            w_v: uniform(c_work, c_work, &mut rng),
        };

        let mut rng = seeds::rng_for(seed, "decoder", 0);
        let decoder = DecoderParams {
            w_prompt_in: uniform(model.prompt_dim, c_work, &mut rng),
            mask_token: token_init(c_work, &mut rng),
            w_q: uniform(c_work, c_work, &mut rng),
            w_k: uniform(c_work, c_work, &mut rng),
            w_v: uniform(c_work, c_work, &mut rng),
        };

        ModelParams {
            adapter: AdapterParams {
                levels,
                prompt_mlp,
                width: r,
                prompt_dim: model.prompt_dim,
            },
            memory,
            decoder,
        }
    }

    /// Register every tensor as a trainable leaf on `tape`, returning a
    /// tracked mirror for one training step.
    pub fn tracked(&self, tape: &mut Tape) -> ModelParams {
        let mut out = self.clone();
        for (_, t) in out.named_mut() {
            *t = tape.leaf(t);
        }
        out
    }

    /// Stable (name, tensor) listing used by the optimizer and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (k, level) in self.adapter.levels.iter().enumerate() {
            out.push((format!("adapter.level{k}.w_down_v"), &level.w_down_v));
            out.push((format!("adapter.level{k}.w_down_t"), &level.w_down_t));
            out.push((format!("adapter.level{k}.w_up_v"), &level.w_up_v));
            out.push((format!("adapter.level{k}.w_up_t"), &level.w_up_t));
            out.push((format!("adapter.level{k}.w_q"), &level.w_q));
            out.push((format!("adapter.level{k}.w_k"), &level.w_k));
            out.push((format!("adapter.level{k}.w_v"), &level.w_v));
        }
        out.push(("adapter.prompt_mlp.w1".into(), &self.adapter.prompt_mlp.w1));
        out.push(("adapter.prompt_mlp.b1".into(), &self.adapter.prompt_mlp.b1));
        out.push(("adapter.prompt_mlp.w2".into(), &self.adapter.prompt_mlp.w2));
        out.push(("adapter.prompt_mlp.b2".into(), &self.adapter.prompt_mlp.b2));
        out.push(("memory.w_fuse".into(), &self.memory.w_fuse));
        out.push(("memory.w_q".into(), &self.memory.w_q));
        out.push(("memory.w_k".into(), &self.memory.w_k));
        out.push(("memory.w_v".into(), &self.memory.w_v));
        out.push(("decoder.w_prompt_in".into(), &self.decoder.w_prompt_in));
        out.push(("decoder.mask_token".into(), &self.decoder.mask_token));
        out.push(("decoder.w_q".into(), &self.decoder.w_q));
        out.push(("decoder.w_k".into(), &self.decoder.w_k));
        out.push(("decoder.w_v".into(), &self.decoder.w_v));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (k, level) in self.adapter.levels.iter_mut().enumerate() {
            out.push((format!("adapter.level{k}.w_down_v"), &mut level.w_down_v));
            out.push((format!("adapter.level{k}.w_down_t"), &mut level.w_down_t));
            out.push((format!("adapter.level{k}.w_up_v"), &mut level.w_up_v));
            out.push((format!("adapter.level{k}.w_up_t"), &mut level.w_up_t));
            out.push((format!("adapter.level{k}.w_q"), &mut level.w_q));
            out.push((format!("adapter.level{k}.w_k"), &mut level.w_k));
            out.push((format!("adapter.level{k}.w_v"), &mut level.w_v));
        }
        out.push(("adapter.prompt_mlp.w1".into(), &mut self.adapter.prompt_mlp.w1));
        out.push(("adapter.prompt_mlp.b1".into(), &mut self.adapter.prompt_mlp.b1));
        out.push(("adapter.prompt_mlp.w2".into(), &mut self.adapter.prompt_mlp.w2));
        out.push(("adapter.prompt_mlp.b2".into(), &mut self.adapter.prompt_mlp.b2));
        out.push(("memory.w_fuse".into(), &mut self.memory.w_fuse));
        out.push(("memory.w_q".into(), &mut self.memory.w_q));
        out.push(("memory.w_k".into(), &mut self.memory.w_k));
        out.push(("memory.w_v".into(), &mut self.memory.w_v));
        out.push(("decoder.w_prompt_in".into(), &mut self.decoder.w_prompt_in));
        out.push(("decoder.mask_token".into(), &mut self.decoder.mask_token));
        out.push(("decoder.w_q".into(), &mut self.decoder.w_q));
        out.push(("decoder.w_k".into(), &mut self.decoder.w_k));
        out.push(("decoder.w_v".into(), &mut self.decoder.w_v));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_listing_is_stable_and_complete() {
        let mut params = ModelParams::init(&ModelConfig::default(), &EncoderConfig::default(), 3);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let mut names_mut: Vec<String> = params.named_mut().into_iter().map(|(n, _)| n).collect();
        names_mut.sort();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(sorted, names_mut);
        assert_eq!(names.len(), 3 * 7 + 4 + 4 + 5);
    }

    #[test]
    fn up_projections_start_at_zero() {
        let params = ModelParams::init(&ModelConfig::default(), &EncoderConfig::default(), 3);
        for level in &params.adapter.levels {
            assert!(level.w_up_v.data().iter().all(|&v| v == 0.0));
            assert!(level.w_up_t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelParams::init(&ModelConfig::default(), &EncoderConfig::default(), 5);
        let b = ModelParams::init(&ModelConfig::default(), &EncoderConfig::default(), 5);
        for ((_, x), (_, y)) in a.named().iter().zip(b.named().iter()) {
            assert_eq!(x.data(), y.data());
        }
    }
}
