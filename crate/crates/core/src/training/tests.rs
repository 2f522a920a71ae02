use std::collections::BTreeMap;

use super::*;
use crate::dataset::BinaryMask;
use crate::encoders::EncoderConfig;
use crate::synth::{generate_dataset, SynthConfig};

fn ms(indices: &[usize], t_v: usize) -> MomentSet {
    MomentSet::new(indices.to_vec(), t_v).unwrap()
}

#[test]
fn full_relevant_set_forces_the_whole_video() {
    let mplus = ms(&[1, 2, 3, 4, 5, 6, 7, 8], 8);
    let mminus = moment_complement(&mplus);
    let mut rng = seeds::rng(1);
    let clip = sample_clip(&mplus, &mminus, 8, &mut rng).unwrap();
    assert_eq!(clip.frames, vec![1, 2, 3, 4, 5, 6, 7, 8]);
    assert!(clip.membership.iter().all(|m| *m == Membership::Relevant));
}

#[test]
fn singleton_relevant_set_is_always_sampled() {
    let mplus = ms(&[2], 4);
    let mminus = moment_complement(&mplus);
    for seed in 0..50 {
        let mut rng = seeds::rng(seed);
        let clip = sample_clip(&mplus, &mminus, 4, &mut rng).unwrap();
        assert!(clip.frames.contains(&2), "seed {seed}: {:?}", clip.frames);
    }
}

#[test]
fn half_rule_and_uniformity_over_many_draws() {
    let mplus = ms(&[1, 2], 4);
    let mminus = moment_complement(&mplus);
    let mut count_f1 = 0usize;
    let mut count_f2 = 0usize;
    let n = 10_000;
    let mut rng = seeds::rng(99);
    for _ in 0..n {
        let clip = sample_clip(&mplus, &mminus, 2, &mut rng).unwrap();
        assert!(clip.relevant_count() >= 1, "half rule violated: {:?}", clip.frames);
        if clip.frames.contains(&1) {
            count_f1 += 1;
        }
        if clip.frames.contains(&2) {
            count_f2 += 1;
        }
    }
    // P(frame in clip) = 1/2 (forced slot) + 1/2 * 1/3 (free slot) = 2/3
    let expect = 2.0 / 3.0;
    let sigma = (expect * (1.0 - expect) / n as f64).sqrt();
    for (label, count) in [("frame1", count_f1), ("frame2", count_f2)] {
        let freq = count as f64 / n as f64;
        assert!(
            (freq - expect).abs() < 3.0 * sigma + 1e-9,
            "{label}: freq {freq} vs {expect}"
        );
    }
}

#[test]
fn clip_keeps_at_least_half_relevant_when_possible() {
    let mut rng = seeds::rng(3);
    for _ in 0..200 {
        let t_v = rng.gen_range(8..=16usize);
        let m_len = rng.gen_range(1..=t_v);
        let mut frames: Vec<usize> = (1..=t_v).collect();
        for i in 0..m_len {
            let j = rng.gen_range(i..frames.len());
            frames.swap(i, j);
        }
        frames.truncate(m_len);
        let mplus = ms(&frames, t_v);
        let mminus = moment_complement(&mplus);
        let t = 8.min(t_v & !1);
        let clip = sample_clip(&mplus, &mminus, t, &mut rng).unwrap();
        assert_eq!(clip.frames.len(), t);
        let mut sorted = clip.frames.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), t, "duplicates in {:?}", clip.frames);
        assert!(clip.relevant_count() >= (t / 2).min(mplus.len()));
    }
}

#[test]
fn clip_rejects_bad_lengths_and_empty_mplus() {
    let mplus = ms(&[1], 6);
    let mminus = moment_complement(&mplus);
    let mut rng = seeds::rng(4);
    assert!(matches!(
        sample_clip(&mplus, &mminus, 3, &mut rng),
        Err(TrainError::BadClipLength { .. })
    ));
    assert!(matches!(
        sample_clip(&mplus, &mminus, 8, &mut rng),
        Err(TrainError::BadClipLength { .. })
    ));
    let empty = MomentSet::empty(6).unwrap();
    assert!(matches!(
        sample_clip(&empty, &moment_complement(&empty), 4, &mut rng),
        Err(TrainError::EmptyMplus)
    ));
}

fn square_mask(h: usize, w: usize, on: bool) -> BinaryMask {
    BinaryMask::new(h, w, vec![u8::from(on); h * w]).unwrap()
}

fn masks_for(frames: usize, on: &[bool]) -> Vec<BinaryMask> {
    (0..frames).map(|i| square_mask(2, 2, on[i])).collect()
}

#[test]
fn oss_discards_objects_outside_the_clip() {
    let masks_1 = masks_for(4, &[true, true, true, true]);
    let mut masks = BTreeMap::new();
    masks.insert("1".to_string(), masks_1.as_slice());
    let mut moments = BTreeMap::new();
    moments.insert("1".to_string(), ms(&[1, 2, 3], 4));
    let target = oss_filter(&masks, &moments, &[4], 2, 2, false).unwrap();
    assert!(target.retained_objects.is_empty());
    assert!(target.frame_targets[0].is_empty_mask());
}

#[test]
fn oss_keeps_overlapping_objects_from_worked_example() {
    let masks_any = masks_for(5, &[true; 5]);
    let mut masks = BTreeMap::new();
    masks.insert("1".to_string(), masks_any.as_slice());
    masks.insert("2".to_string(), masks_any.as_slice());
    let mut moments = BTreeMap::new();
    moments.insert("1".to_string(), ms(&[1, 2, 3], 5));
    moments.insert("2".to_string(), ms(&[3, 5], 5));
    let target = oss_filter(&masks, &moments, &[3, 4], 2, 2, false).unwrap();
    assert_eq!(
        target.retained_objects.iter().collect::<Vec<_>>(),
        vec!["1", "2"]
    );
}

#[test]
fn oss_matches_bruteforce_on_random_cases() {
    let mut rng = seeds::rng(5);
    for _ in 0..100 {
        let t_v = rng.gen_range(4..=12usize);
        let n_obj = rng.gen_range(1..=4usize);
        let mut masks_store: Vec<Vec<BinaryMask>> = Vec::new();
        let mut moments = BTreeMap::new();
        for oi in 0..n_obj {
            let m: Vec<usize> = (1..=t_v).filter(|_| rng.gen_bool(0.4)).collect();
            moments.insert(format!("{oi}"), ms(&m, t_v));
            masks_store.push((0..t_v).map(|_| square_mask(2, 2, rng.gen_bool(0.8))).collect());
        }
        let masks: BTreeMap<String, &[BinaryMask]> = masks_store
            .iter()
            .enumerate()
            .map(|(oi, m)| (format!("{oi}"), m.as_slice()))
            .collect();
        let clip: Vec<usize> = {
            let mut c: Vec<usize> = (1..=t_v).filter(|_| rng.gen_bool(0.5)).collect();
            if c.is_empty() {
                c.push(1);
            }
            c
        };
        let target = oss_filter(&masks, &moments, &clip, 2, 2, false).unwrap();
        // brute force Eq. 6 membership
        for (id, m) in &moments {
            let mut keep = false;
            for &t in &clip {
                for &mi in m.indices() {
                    if mi == t {
                        keep = true;
                    }
                }
            }
            assert_eq!(target.retained_objects.contains(id), keep);
        }
    }
}

#[test]
fn oss_retention_is_monotone_in_the_clip() {
    let mut rng = seeds::rng(6);
    for _ in 0..50 {
        let t_v = 10;
        let mut moments = BTreeMap::new();
        let mut masks_store: Vec<Vec<BinaryMask>> = Vec::new();
        for oi in 0..3 {
            let m: Vec<usize> = (1..=t_v).filter(|_| rng.gen_bool(0.3)).collect();
            moments.insert(format!("{oi}"), ms(&m, t_v));
            masks_store.push((0..t_v).map(|_| square_mask(2, 2, true)).collect());
        }
        let masks: BTreeMap<String, &[BinaryMask]> = masks_store
            .iter()
            .enumerate()
            .map(|(oi, m)| (format!("{oi}"), m.as_slice()))
            .collect();
        let small: Vec<usize> = vec![2, 5];
        let large: Vec<usize> = vec![2, 5, 8, 9];
        let a = oss_filter(&masks, &moments, &small, 2, 2, false).unwrap();
        let b = oss_filter(&masks, &moments, &large, 2, 2, false).unwrap();
        assert!(a.retained_objects.is_subset(&b.retained_objects));
    }
}

#[test]
fn oss_missing_mask_is_reported() {
    let short = masks_for(2, &[true, true]);
    let mut masks = BTreeMap::new();
    masks.insert("1".to_string(), short.as_slice());
    let mut moments = BTreeMap::new();
    moments.insert("1".to_string(), ms(&[3], 4));
    let err = oss_filter(&masks, &moments, &[3], 2, 2, false).unwrap_err();
    assert!(matches!(err, TrainError::MissingMask { frame: 3, .. }));
}

// ---------------------------------------------------------------------------
// end-to-end training behavior on a tiny benchmark
// ---------------------------------------------------------------------------

fn tiny_encoders() -> FrozenEncoders {
    FrozenEncoders::new(EncoderConfig {
        text_dim: 12,
        channels: vec![8, 10, 12],
        patch: 4,
        image_channels: 3,
        vocab_size: 16,
        seed: 5,
    })
}

fn tiny_dataset(videos: usize, seed: u64) -> Vec<VideoSample> {
    generate_dataset(
        &SynthConfig {
            videos,
            t_v: 8,
            canvas: 32,
            min_objects: 2,
            max_objects: 2,
            distractor_rate: 0.5,
            min_size: 3,
            max_size: 4,
            max_expressions: 1,
        },
        seed,
    )
    .unwrap()
}

/// Larger objects on a larger canvas give the decoder enough spatial
/// resolution to overfit quickly.
fn overfit_dataset(seed: u64) -> Vec<VideoSample> {
    generate_dataset(
        &SynthConfig {
            videos: 1,
            t_v: 8,
            canvas: 64,
            min_objects: 2,
            max_objects: 2,
            distractor_rate: 0.5,
            min_size: 8,
            max_size: 10,
            max_expressions: 1,
        },
        seed,
    )
    .unwrap()
}

fn tiny_train(
    samples: &[VideoSample],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> TrainOutcome {
    let encoders = tiny_encoders();
    let cfg = TrainConfig {
        clip_length: 4,
        epochs,
        lr,
        ..TrainConfig::default()
    };
    train(
        samples,
        &encoders,
        &ModelConfig {
            adapter_width: 8,
            prompt_dim: 12,
        },
        &MemoryConfig::default(),
        &cfg,
        seed,
        None,
        None,
    )
    .unwrap()
}

#[test]
fn zero_learning_rate_keeps_initial_params() {
    let samples = tiny_dataset(2, 21);
    let out = tiny_train(&samples, 1, 0.0, 7);
    let fresh = ModelParams::init(
        &ModelConfig {
            adapter_width: 8,
            prompt_dim: 12,
        },
        &tiny_encoders().config,
        seeds::derive_seed(7, "init", 0),
    );
    for ((_, a), (_, b)) in out.params.named().iter().zip(fresh.named().iter()) {
        let a_bits: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let b_bits: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a_bits, b_bits);
    }
}

#[test]
fn same_seed_reproduces_the_loss_curve() {
    let samples = tiny_dataset(3, 22);
    let a = tiny_train(&samples, 2, 1e-3, 9);
    let b = tiny_train(&samples, 2, 1e-3, 9);
    assert_eq!(a.curve.len(), b.curve.len());
    for (x, y) in a.curve.iter().zip(&b.curve) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
    }
}

#[test]
fn single_sample_overfit_halves_the_loss() {
    let samples = overfit_dataset(23);
    let out = tiny_train(&samples, 200, 1e-2, 11);
    let first = out.curve.first().unwrap().total;
    let last = out.curve.last().unwrap().total;
    assert!(
        last <= 0.5 * first,
        "loss went from {first} to {last}, expected at least a 50% drop"
    );
}

#[test]
fn gradients_reach_every_trainable_parameter() {
    // generic random batch: randomized params so zero-init up-projections
    // do not mask gradient flow; the expression must have a partial-span
    // moment so both routing paths run
    let samples: Vec<VideoSample> = tiny_dataset(8, 24);
    let encoders = tiny_encoders();
    let model_cfg = ModelConfig {
        adapter_width: 8,
        prompt_dim: 12,
    };
    let mut params = ModelParams::init(&model_cfg, &encoders.config, 1);
    let mut rng = seeds::rng(25);
    for (_, t) in params.named_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    let (sample, expr) = samples
        .iter()
        .flat_map(|s| s.expressions.iter().map(move |e| (s, e)))
        .find(|(s, e)| {
            let m = s.expression_mplus(e).unwrap();
            !m.is_empty() && !m.is_full_span()
        })
        .expect("a partial-span expression exists");
    let pyramid = encoders
        .encode_video(&sample.frames, sample.h, sample.w)
        .unwrap();
    let text = encoders.encode_text(&expr.tokens).unwrap();
    let mplus = sample.expression_mplus(expr).unwrap();

    let mut tape = Tape::new();
    let tracked = params.tracked(&mut tape);
    let clip: Vec<usize> = (1..=sample.t_v).collect();
    let fwd = forward_features(
        &mut tape,
        &encoders,
        &pyramid,
        &text,
        &clip,
        &expr.verb_indices,
        &tracked,
    )
    .unwrap();
    let grid = work_grid(&encoders, sample.h, sample.w);
    let mem_cfg = MemoryConfig::default();
    let sp = StepParams {
        memory: &tracked.memory,
        decoder: &tracked.decoder,
        grid: &grid,
        config: &mem_cfg,
    };
    let mut state = PropagationState::new(mem_cfg.capacity);
    let mut logits = Vec::new();
    for (i, &frame) in clip.iter().enumerate() {
        let membership = if mplus.contains(frame) {
            Membership::Relevant
        } else {
            Membership::Irrelevant
        };
        let prompt = (membership == Membership::Relevant).then_some(&fwd.prompt);
        logits.push(
            mdp_step(
                &mut tape,
                frame,
                membership,
                Some(&fwd.frames.adapter[i]),
                Some(&fwd.frames.raw[i]),
                prompt,
                &mut state,
                &sp,
            )
            .unwrap(),
        );
    }
    let targets: Vec<BinaryMask> = clip
        .iter()
        .map(|&f| sample.expression_target(expr, f).unwrap())
        .collect();
    let frame_targets: Vec<FrameTarget> = targets
        .iter()
        .map(|t| FrameTarget {
            target: t,
            ignore: None,
        })
        .collect();
    let loss = total_loss(&mut tape, &logits, &frame_targets, &LossWeights::default()).unwrap();
    let grads = tape.backward(&loss.total).unwrap();
    for (name, tensor) in tracked.named() {
        let g = grads.wrt(tensor).unwrap_or_else(|| panic!("no grad for {name}"));
        let norm: f64 = g.data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "parameter {name} received a zero gradient");
    }
}

#[test]
fn resumed_training_matches_the_unbroken_curve() {
    let samples = tiny_dataset(2, 26);
    let encoders = tiny_encoders();
    let model_cfg = ModelConfig {
        adapter_width: 8,
        prompt_dim: 12,
    };
    let mem_cfg = MemoryConfig::default();
    let full_cfg = TrainConfig {
        clip_length: 4,
        epochs: 4,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let unbroken = train(
        &samples, &encoders, &model_cfg, &mem_cfg, &full_cfg, 13, None, None,
    )
    .unwrap();

    let half_cfg = TrainConfig {
        epochs: 2,
        ..full_cfg.clone()
    };
    let first = train(
        &samples, &encoders, &model_cfg, &mem_cfg, &half_cfg, 13, None, None,
    )
    .unwrap();
    let resumed = train(
        &samples,
        &encoders,
        &model_cfg,
        &mem_cfg,
        &full_cfg,
        13,
        None,
        Some(ResumeState {
            params: first.params,
            optimizer: first.optimizer,
            next_step: first.steps,
        }),
    )
    .unwrap();

    let tail: Vec<u64> = unbroken.curve[first.steps as usize..]
        .iter()
        .map(|r| r.total.to_bits())
        .collect();
    let resumed_bits: Vec<u64> = resumed.curve.iter().map(|r| r.total.to_bits()).collect();
    assert_eq!(tail, resumed_bits);
    for ((_, a), (_, b)) in unbroken.params.named().iter().zip(resumed.params.named().iter()) {
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
