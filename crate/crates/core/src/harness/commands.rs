//! Command implementations shared by the CLI binary and the test suites.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    decode_mask_rle, encode_mask_rle, parse_dataset, write_dataset, RleMask, VideoSample,
    FORMAT_VERSION,
};
use crate::encoders::FrozenEncoders;
use crate::eval::{
    corpus_means, default_boundary_tolerance, evaluate_expression, retrieval_metrics, CorpusMetrics,
    EvalReport, ExpressionEval, ExpressionScores, RetrievalQuery, ScoredSegment,
};
use crate::keyframe::{
    build_plan, parse_score_csv, RelevanceScorer, ScorerKind, SelectionPlan, SelectionStrategy,
};
use crate::memory::{run_inference, MemoryConfig, StepParams};
use crate::moments::{set_to_segments, MomentSet};
use crate::params::ModelParams;
use crate::pipeline::{forward_features, work_grid};
use crate::seeds;
use crate::synth::{generate_dataset, SynthConfig};
use crate::tensor::Tape;
use crate::training::{train, AblationFlags, MomentOverrides, ResumeState, TrainConfig};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::{atomic_write, build_id, HarnessError, IntervalSource, MomentSource, RunConfig};

// ---------------------------------------------------------------------------
// file schemas
// ---------------------------------------------------------------------------

/// Predicted masks per expression in the dataset JSON envelope.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionFile {
    pub format_version: String,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub expression_index: usize,
    pub masks: Vec<RleMask>,
    /// The relevant-set proxy the inference ran with (1-based frames).
    #[serde(default)]
    pub moment_proxy: Option<Vec<usize>>,
    /// Per-frame relevance scores when a scorer was involved.
    #[serde(default)]
    pub frame_scores: Option<Vec<f64>>,
}

/// Ranked interval predictions per expression for retrieval evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentsFile {
    pub format_version: String,
    pub queries: Vec<SegmentsQuery>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentsQuery {
    pub video_id: String,
    pub expression_index: usize,
    pub predictions: Vec<SegmentPrediction>,
    #[serde(default)]
    pub top_frame: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

fn read_file(path: &Path, what: &str) -> Result<Vec<u8>, HarnessError> {
    std::fs::read(path)
        .map_err(|e| HarnessError::Data(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_samples(path: &Path) -> Result<Vec<VideoSample>, HarnessError> {
    let bytes = read_file(path, "dataset")?;
    parse_dataset(&bytes).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

fn dataset_path<'a>(config: &'a RunConfig, which: &str) -> Result<&'a Path, HarnessError> {
    config
        .dataset
        .as_deref()
        .ok_or_else(|| HarnessError::Config(format!("`dataset` must be set for {which}")))
}

fn scorer_for(config: &RunConfig) -> Result<Option<RelevanceScorer>, HarnessError> {
    let needs_scores = matches!(
        config.inference.strategy,
        SelectionStrategy::Topk { .. } | SelectionStrategy::TopkInInterval { .. }
    );
    if !needs_scores {
        return Ok(None);
    }
    let kind = config.inference.scorer.clone().ok_or_else(|| {
        HarnessError::Config("inference.scorer is required for top-k strategies".into())
    })?;
    let table = match (&kind, &config.inference.scores_file) {
        (ScorerKind::External, Some(path)) => {
            let bytes = read_file(path, "score file")?;
            let text = String::from_utf8(bytes)
                .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
            Some(parse_score_csv(&text).map_err(|e| HarnessError::Data(e.to_string()))?)
        }
        (ScorerKind::External, None) => {
            return Err(HarnessError::Config(
                "inference.scores_file is required for the external scorer".into(),
            ))
        }
        _ => None,
    };
    Ok(Some(RelevanceScorer::new(kind, table)))
}

fn external_segments(
    config: &RunConfig,
) -> Result<Option<BTreeMap<(String, usize), Vec<[usize; 2]>>>, HarnessError> {
    let path = match (&config.inference.interval_source, &config.inference.segments_file) {
        (IntervalSource::SegmentsFile, Some(p)) => p,
        (IntervalSource::SegmentsFile, None) => {
            return Err(HarnessError::Config(
                "inference.segments_file is required when interval_source is segments_file".into(),
            ))
        }
        _ => return Ok(None),
    };
    let file = parse_segments_file(path)?;
    Ok(Some(
        file.queries
            .into_iter()
            .map(|q| {
                (
                    (q.video_id, q.expression_index),
                    q.predictions.iter().map(|p| [p.start, p.end]).collect(),
                )
            })
            .collect(),
    ))
}

fn parse_segments_file(path: &Path) -> Result<SegmentsFile, HarnessError> {
    let bytes = read_file(path, "segments file")?;
    let file: SegmentsFile = serde_json::from_slice(&bytes)
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    if file.format_version != FORMAT_VERSION {
        return Err(HarnessError::Data(format!(
            "segments file format {} unsupported (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    Ok(file)
}

struct PlanOutcome {
    plan: SelectionPlan,
    scores: Option<Vec<f64>>,
}

/// Resolve the inference plan for one (video, expression).
fn plan_for(
    config: &RunConfig,
    scorer: Option<&RelevanceScorer>,
    segments: Option<&BTreeMap<(String, usize), Vec<[usize; 2]>>>,
    sample: &VideoSample,
    expression_index: usize,
) -> Result<PlanOutcome, HarnessError> {
    let expr = &sample.expressions[expression_index];
    let gt_mplus = sample
        .expression_mplus(expr)
        .map_err(|e| HarnessError::Data(e.to_string()))?;
    let scores = match scorer {
        Some(s) => Some(
            s.score_frames(&sample.video_id, expression_index, sample.t_v, Some(&gt_mplus))
                .map_err(|e| HarnessError::Runtime(e.to_string()))?,
        ),
        None => None,
    };
    let gt_segments = set_to_segments(&gt_mplus);
    let interval: Option<Vec<[usize; 2]>> = match config.inference.strategy {
        SelectionStrategy::TopkInInterval { .. } => match config.inference.interval_source {
            IntervalSource::GtSegments => Some(gt_segments.clone()),
            IntervalSource::SegmentsFile => {
                let table = segments.ok_or_else(|| {
                    HarnessError::Config("segments file not loaded for interval restriction".into())
                })?;
                Some(
                    table
                        .get(&(sample.video_id.clone(), expression_index))
                        .cloned()
                        .ok_or_else(|| {
                            HarnessError::Data(format!(
                                "no predicted segments for {}/{expression_index}",
                                sample.video_id
                            ))
                        })?,
                )
            }
        },
        _ => None,
    };
    // per-expression substream for the random strategy
    let strategy = match &config.inference.strategy {
        SelectionStrategy::Random { k, seed } => SelectionStrategy::Random {
            k: *k,
            seed: seeds::derive_seed(*seed, &sample.video_id, expression_index as u64),
        },
        other => other.clone(),
    };
    let plan = build_plan(
        &strategy,
        scores.as_deref(),
        Some(&gt_mplus),
        interval.as_deref(),
        sample.t_v,
    )
    .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    Ok(PlanOutcome { plan, scores })
}

/// Pseudo-moment overrides for training when the moment source is the
/// selection strategy rather than the annotations.
fn selection_overrides(
    config: &RunConfig,
    samples: &[VideoSample],
) -> Result<Option<MomentOverrides>, HarnessError> {
    if config.moment_source == MomentSource::Annotations {
        return Ok(None);
    }
    let scorer = scorer_for(config)?;
    let segments = external_segments(config)?;
    let mut overrides = MomentOverrides::new();
    for (vi, sample) in samples.iter().enumerate() {
        for ei in 0..sample.expressions.len() {
            let outcome = plan_for(config, scorer.as_ref(), segments.as_ref(), sample, ei)?;
            overrides.insert((vi, ei), outcome.plan.proxy);
        }
    }
    Ok(Some(overrides))
}

/// Run inference over a dataset with trained parameters.
fn infer_dataset(
    config: &RunConfig,
    samples: &[VideoSample],
    encoders: &FrozenEncoders,
    params: &ModelParams,
) -> Result<Vec<PredictionRecord>, HarnessError> {
    let scorer = scorer_for(config)?;
    let segments = external_segments(config)?;
    let memory_cfg: MemoryConfig = config.memory.into();
    let items: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(vi, s)| (0..s.expressions.len()).map(move |ei| (vi, ei)))
        .collect();

    items
        .par_iter()
        .map(|&(vi, ei)| {
            let sample = &samples[vi];
            let expr = &sample.expressions[ei];
            let use_mdp = config.training.ablation.use_mdp;
            let (plan, scores) = if use_mdp {
                let outcome = plan_for(config, scorer.as_ref(), segments.as_ref(), sample, ei)?;
                (outcome.plan, outcome.scores)
            } else {
                // MDP disabled: every frame takes the text-conditioned path
                let full = MomentSet::full(sample.t_v)
                    .map_err(|e| HarnessError::Runtime(e.to_string()))?;
                (
                    SelectionPlan {
                        priority: full.indices().to_vec(),
                        proxy: full,
                    },
                    None,
                )
            };

            let pyramid = encoders
                .encode_video(&sample.frames, sample.h, sample.w)
                .map_err(|e| HarnessError::Runtime(e.to_string()))?;
            let text = encoders
                .encode_text(&expr.tokens)
                .map_err(|e| HarnessError::Runtime(e.to_string()))?;
            let mut tape = Tape::new();
            let all_frames: Vec<usize> = (1..=sample.t_v).collect();
            let fwd = forward_features(
                &mut tape,
                encoders,
                &pyramid,
                &text,
                &all_frames,
                &expr.verb_indices,
                params,
            )
            .map_err(|e| HarnessError::Runtime(e.to_string()))?;
            let grid = work_grid(encoders, sample.h, sample.w);
            let step_params = StepParams {
                memory: &params.memory,
                decoder: &params.decoder,
                grid: &grid,
                config: &memory_cfg,
            };
            let order = plan.full_order();
            let out = run_inference(&mut tape, &fwd.frames, &fwd.prompt, &plan.proxy, &order, &step_params)
                .map_err(|e| HarnessError::Runtime(e.to_string()))?;
            Ok(PredictionRecord {
                video_id: sample.video_id.clone(),
                expression_index: ei,
                masks: out.masks.iter().map(encode_mask_rle).collect(),
                moment_proxy: Some(plan.proxy.indices().to_vec()),
                frame_scores: scores,
            })
        })
        .collect()
}

/// Segmentation + retrieval evaluation of a prediction set against a dataset.
fn evaluate_predictions(
    config: &RunConfig,
    samples: &[VideoSample],
    records: &[PredictionRecord],
) -> Result<EvalReport, HarnessError> {
    let by_id: BTreeMap<&str, &VideoSample> =
        samples.iter().map(|s| (s.video_id.as_str(), s)).collect();

    let scored: Result<Vec<ExpressionScores>, HarnessError> = records
        .par_iter()
        .map(|record| {
            let sample = by_id.get(record.video_id.as_str()).ok_or_else(|| {
                HarnessError::Data(format!("prediction references unknown video {}", record.video_id))
            })?;
            let expr = sample
                .expressions
                .get(record.expression_index)
                .ok_or_else(|| {
                    HarnessError::Data(format!(
                        "video {} has no expression {}",
                        record.video_id, record.expression_index
                    ))
                })?;
            if record.masks.len() != sample.t_v {
                return Err(HarnessError::Data(format!(
                    "{}/{}: {} predicted masks for {} frames",
                    record.video_id,
                    record.expression_index,
                    record.masks.len(),
                    sample.t_v
                )));
            }
            let pred = record
                .masks
                .iter()
                .map(decode_mask_rle)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| HarnessError::Data(e.to_string()))?;
            let gt = (1..=sample.t_v)
                .map(|f| sample.expression_target(expr, f))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| HarnessError::Data(e.to_string()))?;
            let tol = config
                .metrics
                .boundary_tol
                .unwrap_or_else(|| default_boundary_tolerance(sample.h, sample.w));
            evaluate_expression(
                &ExpressionEval {
                    video_id: record.video_id.clone(),
                    expression_index: record.expression_index,
                    pred,
                    gt,
                },
                tol,
            )
            .map_err(|e| HarnessError::Runtime(e.to_string()))
        })
        .collect();
    let per_expression = scored?;

    // retrieval metrics from the embedded moment proxies
    let mut queries = Vec::new();
    let mut top1_sets: Vec<(usize, MomentSet)> = Vec::new();
    for record in records {
        let sample = by_id[record.video_id.as_str()];
        let expr = &sample.expressions[record.expression_index];
        let gt_mplus = sample
            .expression_mplus(expr)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        if let Some(proxy) = &record.moment_proxy {
            let proxy_set = MomentSet::new(proxy.clone(), sample.t_v)
                .map_err(|e| HarnessError::Data(e.to_string()))?;
            let segments = set_to_segments(&proxy_set);
            let ranked: Vec<ScoredSegment> = segments
                .iter()
                .map(|seg| {
                    let score = match &record.frame_scores {
                        Some(scores) => {
                            let sum: f64 = (seg[0]..=seg[1]).map(|f| scores[f - 1]).sum();
                            sum / (seg[1] - seg[0] + 1) as f64
                        }
                        None => (seg[1] - seg[0] + 1) as f64,
                    };
                    ScoredSegment {
                        start: seg[0],
                        end: seg[1],
                        score,
                    }
                })
                .collect();
            if !ranked.is_empty() {
                let top_frame = match &record.frame_scores {
                    Some(scores) => (1..=sample.t_v)
                        .max_by(|&a, &b| {
                            scores[a - 1]
                                .partial_cmp(&scores[b - 1])
                                .expect("finite scores")
                                .then(b.cmp(&a))
                        })
                        .expect("at least one frame"),
                    None => {
                        let top = ranked
                            .iter()
                            .max_by(|a, b| a.score.partial_cmp(&b.score).expect("finite"))
                            .expect("non-empty");
                        top.start
                    }
                };
                queries.push(RetrievalQuery {
                    predictions: ranked,
                    gt: set_to_segments(&gt_mplus),
                });
                top1_sets.push((top_frame, gt_mplus));
            }
        }
    }
    let top1_queries: Vec<(usize, &MomentSet)> =
        top1_sets.iter().map(|(f, m)| (*f, m)).collect();
    let retrieval = retrieval_metrics(&queries, &top1_queries)
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;

    let (j, f, jf) = corpus_means(&per_expression);
    Ok(EvalReport {
        build_id: build_id(),
        config_hash: Some(config.hash()),
        per_expression,
        corpus: CorpusMetrics {
            j,
            f,
            jf,
            ..retrieval
        },
    })
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

/// Generate the synthetic benchmark dataset and its regeneration manifest.
pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    let samples = generate_dataset(&config.synth, config.seed)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let bytes = write_dataset(&samples).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    atomic_write(out, &bytes)?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        seed: u64,
        config_hash: &'a str,
    }
    let manifest = serde_json::to_vec_pretty(&Manifest {
        seed: config.seed,
        config_hash: &config.hash(),
    })
    .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let manifest_path = out.with_extension("manifest.json");
    atomic_write(&manifest_path, &manifest)
}

/// Train on the configured dataset; writes the checkpoint and a loss CSV.
pub fn cmd_train(
    config: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    allow_hash_mismatch: bool,
) -> Result<(), HarnessError> {
    let samples = load_samples(dataset_path(config, "train")?)?;
    let encoders = FrozenEncoders::new(config.encoder.clone());
    let overrides = selection_overrides(config, &samples)?;
    let resume_state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(
                path,
                &config.model,
                &config.encoder,
                &config.hash(),
                allow_hash_mismatch,
            )?;
            Some(ResumeState {
                params: ckpt.params,
                optimizer: ckpt.optimizer,
                next_step: ckpt.step,
            })
        }
        None => None,
    };
    let outcome = train(
        &samples,
        &encoders,
        &config.model,
        &config.memory.into(),
        &config.training,
        config.seed,
        overrides.as_ref(),
        resume_state,
    )
    .map_err(|e| HarnessError::Runtime(e.to_string()))?;

    save_checkpoint(out, &outcome.params, &outcome.optimizer, outcome.steps, &config.hash())?;

    let mut csv = String::from("step,total,dice,focal\n");
    for row in &outcome.curve {
        csv.push_str(&format!("{},{},{},{}\n", row.step, row.total, row.dice, row.focal));
    }
    atomic_write(&out.with_extension("loss.csv"), csv.as_bytes())
}

/// Segment the configured dataset with a trained checkpoint.
pub fn cmd_infer(
    config: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    allow_hash_mismatch: bool,
) -> Result<(), HarnessError> {
    let samples = load_samples(dataset_path(config, "infer")?)?;
    let encoders = FrozenEncoders::new(config.encoder.clone());
    let ckpt = load_checkpoint(
        checkpoint,
        &config.model,
        &config.encoder,
        &config.hash(),
        allow_hash_mismatch,
    )?;
    let records = infer_dataset(config, &samples, &encoders, &ckpt.params)?;
    let file = PredictionFile {
        format_version: FORMAT_VERSION.to_string(),
        predictions: records,
    };
    let bytes =
        serde_json::to_vec_pretty(&file).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    atomic_write(out, &bytes)
}

/// Evaluate a prediction file against a dataset; returns the report.
pub fn cmd_eval(
    config: &RunConfig,
    predictions: &Path,
    dataset: &Path,
    out: Option<&Path>,
) -> Result<EvalReport, HarnessError> {
    let samples = load_samples(dataset)?;
    let bytes = read_file(predictions, "prediction file")?;
    let file: PredictionFile = serde_json::from_slice(&bytes)
        .map_err(|e| HarnessError::Data(format!("{}: {e}", predictions.display())))?;
    if file.format_version != FORMAT_VERSION {
        return Err(HarnessError::Data(format!(
            "prediction file format {} unsupported (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    let report = evaluate_predictions(config, &samples, &file.predictions)?;
    if let Some(path) = out {
        let bytes =
            serde_json::to_vec_pretty(&report).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        atomic_write(path, &bytes)?;
    }
    Ok(report)
}

/// Evaluate ranked interval predictions (moment retrieval) against a dataset.
pub fn cmd_retrieval_eval(
    config: &RunConfig,
    segments: &Path,
    dataset: &Path,
    out: Option<&Path>,
) -> Result<EvalReport, HarnessError> {
    let samples = load_samples(dataset)?;
    let file = parse_segments_file(segments)?;
    let by_id: BTreeMap<&str, &VideoSample> =
        samples.iter().map(|s| (s.video_id.as_str(), s)).collect();

    let mut queries = Vec::new();
    let mut top1_sets = Vec::new();
    for q in &file.queries {
        let sample = by_id.get(q.video_id.as_str()).ok_or_else(|| {
            HarnessError::Data(format!("segments reference unknown video {}", q.video_id))
        })?;
        let expr = sample.expressions.get(q.expression_index).ok_or_else(|| {
            HarnessError::Data(format!(
                "video {} has no expression {}",
                q.video_id, q.expression_index
            ))
        })?;
        let gt_mplus = sample
            .expression_mplus(expr)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        queries.push(RetrievalQuery {
            predictions: q
                .predictions
                .iter()
                .map(|p| ScoredSegment {
                    start: p.start,
                    end: p.end,
                    score: p.score,
                })
                .collect(),
            gt: set_to_segments(&gt_mplus),
        });
        let top_frame = q.top_frame.or_else(|| {
            q.predictions
                .iter()
                .max_by(|a, b| a.score.partial_cmp(&b.score).expect("finite"))
                .map(|p| p.start)
        });
        if let Some(frame) = top_frame {
            top1_sets.push((frame, gt_mplus));
        }
    }
    let top1_queries: Vec<(usize, &MomentSet)> =
        top1_sets.iter().map(|(f, m)| (*f, m)).collect();
    let corpus = retrieval_metrics(&queries, &top1_queries)
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let report = EvalReport {
        build_id: build_id(),
        config_hash: Some(config.hash()),
        per_expression: Vec::new(),
        corpus,
    };
    if let Some(path) = out {
        let bytes =
            serde_json::to_vec_pretty(&report).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        atomic_write(path, &bytes)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblateRow {
    pub use_moment_sampling: bool,
    pub use_mdp: bool,
    pub use_oss: bool,
    pub per_seed_jf: Vec<f64>,
    pub mean_j: f64,
    pub mean_f: f64,
    pub mean_jf: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblateReport {
    pub build_id: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblateRow>,
}

impl AblateReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<9} {:<4} {:<4} {:>8} {:>8} {:>8}\n",
            "sampling", "mdp", "oss", "J", "F", "J&F"
        ));
        let tick = |b: bool| if b { "x" } else { "-" };
        for row in &self.rows {
            out.push_str(&format!(
                "{:<9} {:<4} {:<4} {:>8.2} {:>8.2} {:>8.2}\n",
                tick(row.use_moment_sampling),
                tick(row.use_mdp),
                tick(row.use_oss),
                row.mean_j,
                row.mean_f,
                row.mean_jf
            ));
        }
        out
    }
}

/// The 2^3 flag grid in the ablation-table order: baseline, +sampling,
/// +sampling+MDP, +sampling+OSS, full system, then the remaining combos.
pub fn ablation_grid() -> Vec<AblationFlags> {
    [
        (false, false, false),
        (true, false, false),
        (true, true, false),
        (true, false, true),
        (true, true, true),
        (false, true, false),
        (false, false, true),
        (false, true, true),
    ]
    .into_iter()
    .map(|(s, m, o)| AblationFlags {
        use_moment_sampling: s,
        use_mdp: m,
        use_oss: o,
    })
    .collect()
}

/// Train + infer + eval for one flag combination and seed; returns corpus
/// (J, F, J&F). Shared by `cmd_ablate` and the acceptance suite.
pub fn run_benchmark_once(
    config: &RunConfig,
    train_samples: &[VideoSample],
    eval_samples: &[VideoSample],
    flags: AblationFlags,
    seed: u64,
) -> Result<(f64, f64, f64), HarnessError> {
    let mut run_config = config.clone();
    run_config.seed = seed;
    run_config.training.ablation = flags;

    let encoders = FrozenEncoders::new(run_config.encoder.clone());
    let overrides = selection_overrides(&run_config, train_samples)?;
    let outcome = train(
        train_samples,
        &encoders,
        &run_config.model,
        &run_config.memory.into(),
        &run_config.training,
        seed,
        overrides.as_ref(),
        None,
    )
    .map_err(|e| HarnessError::Runtime(e.to_string()))?;

    let records = infer_dataset(&run_config, eval_samples, &encoders, &outcome.params)?;
    let report = evaluate_predictions(&run_config, eval_samples, &records)?;
    Ok((
        report.corpus.j.unwrap_or(0.0),
        report.corpus.f.unwrap_or(0.0),
        report.corpus.jf.unwrap_or(0.0),
    ))
}

/// Generate the benchmark train/eval splits for an ablation run.
pub fn benchmark_datasets(config: &RunConfig) -> Result<(Vec<VideoSample>, Vec<VideoSample>), HarnessError> {
    let train_ds = generate_dataset(&config.synth, seeds::derive_seed(config.seed, "bench-train", 0))
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let eval_cfg = SynthConfig {
        videos: (config.synth.videos / 5).max(1),
        ..config.synth.clone()
    };
    let eval_ds = generate_dataset(&eval_cfg, seeds::derive_seed(config.seed, "bench-eval", 0))
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok((train_ds, eval_ds))
}

/// Sweep the 2^3 ablation grid over the configured seeds.
pub fn cmd_ablate(config: &RunConfig, out: Option<&Path>) -> Result<AblateReport, HarnessError> {
    let (train_ds, eval_ds) = benchmark_datasets(config)?;
    let grid = ablation_grid();
    let jobs: Vec<(usize, AblationFlags, u64)> = grid
        .iter()
        .enumerate()
        .flat_map(|(ri, &flags)| config.ablate.seeds.iter().map(move |&s| (ri, flags, s)))
        .collect();
    let results: Result<Vec<(usize, (f64, f64, f64))>, HarnessError> = jobs
        .par_iter()
        .map(|&(ri, flags, seed)| {
            run_benchmark_once(config, &train_ds, &eval_ds, flags, seed).map(|r| (ri, r))
        })
        .collect();
    let results = results?;

    let rows: Vec<AblateRow> = grid
        .iter()
        .enumerate()
        .map(|(ri, flags)| {
            let per_seed: Vec<(f64, f64, f64)> = results
                .iter()
                .filter(|(i, _)| *i == ri)
                .map(|(_, r)| *r)
                .collect();
            let n = per_seed.len() as f64;
            AblateRow {
                use_moment_sampling: flags.use_moment_sampling,
                use_mdp: flags.use_mdp,
                use_oss: flags.use_oss,
                per_seed_jf: per_seed.iter().map(|r| r.2).collect(),
                mean_j: per_seed.iter().map(|r| r.0).sum::<f64>() / n,
                mean_f: per_seed.iter().map(|r| r.1).sum::<f64>() / n,
                mean_jf: per_seed.iter().map(|r| r.2).sum::<f64>() / n,
            }
        })
        .collect();

    let report = AblateReport {
        build_id: build_id(),
        config_hash: config.hash(),
        seeds: config.ablate.seeds.clone(),
        rows,
    };
    if let Some(path) = out {
        let bytes =
            serde_json::to_vec_pretty(&report).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        atomic_write(path, &bytes)?;
    }
    Ok(report)
}
