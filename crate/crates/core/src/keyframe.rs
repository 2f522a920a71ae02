//! Frame-relevance scoring and keyframe selection strategies used to supply
//! (or replace) moment sets at inference time.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moments::{MomentError, MomentSet};
use crate::seeds;

#[derive(Debug, Error)]
pub enum KeyframeError {
    #[error("top-k selection needs k >= 1")]
    ZeroK,
    #[error("scorer accuracy must lie in [0,1], got {0}")]
    BadAccuracy(f64),
    #[error("strategy `{strategy}` is missing required input: {missing}")]
    MissingInput {
        strategy: &'static str,
        missing: &'static str,
    },
    #[error("no external score for video {video_id} expression {expression_index} frame {frame}")]
    MissingScore {
        video_id: String,
        expression_index: usize,
        frame: usize,
    },
    #[error("external score file row {row}: {message}")]
    BadScoreRow { row: usize, message: String },
    #[error(transparent)]
    Moment(#[from] MomentError),
}

/// External per-frame scores keyed by (video_id, expression_index, frame).
pub type ScoreTable = BTreeMap<(String, usize, usize), f64>;

/// Parse the external scorer CSV: `video_id,expression_index,frame,score`
/// with 1-based frames.
pub fn parse_score_csv(text: &str) -> Result<ScoreTable, KeyframeError> {
    let mut out = ScoreTable::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue; // header
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(KeyframeError::BadScoreRow {
                row: i + 1,
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let expression_index: usize = fields[1].trim().parse().map_err(|e| KeyframeError::BadScoreRow {
            row: i + 1,
            message: format!("expression_index: {e}"),
        })?;
        let frame: usize = fields[2].trim().parse().map_err(|e| KeyframeError::BadScoreRow {
            row: i + 1,
            message: format!("frame: {e}"),
        })?;
        let score: f64 = fields[3].trim().parse().map_err(|e| KeyframeError::BadScoreRow {
            row: i + 1,
            message: format!("score: {e}"),
        })?;
        out.insert((fields[0].trim().to_string(), expression_index, frame), score);
    }
    Ok(out)
}

/// Frame scorer; a stand-in for external vision-language scoring models.
/// Externally tagged in JSON: `{"oracle_noisy": {"accuracy": 0.5, "seed": 1}}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerKind {
    /// Score 1 on annotated relevant frames and 0 elsewhere, each frame's
    /// score flipped with probability `1 - accuracy`, plus small seeded
    /// tie-breaking noise.
    OracleNoisy { accuracy: f64, seed: u64 },
    UniformRandom { seed: u64 },
    /// Scores looked up from an external table (loaded from CSV).
    External,
}

pub struct RelevanceScorer {
    pub kind: ScorerKind,
    pub table: Option<ScoreTable>,
}

impl RelevanceScorer {
    pub fn new(kind: ScorerKind, table: Option<ScoreTable>) -> Self {
        RelevanceScorer { kind, table }
    }

    /// Deterministic per-frame scores for one (video, expression) pair.
    pub fn score_frames(
        &self,
        video_id: &str,
        expression_index: usize,
        t_v: usize,
        gt_mplus: Option<&MomentSet>,
    ) -> Result<Vec<f64>, KeyframeError> {
        match &self.kind {
            ScorerKind::OracleNoisy { accuracy, seed } => {
                if !(0.0..=1.0).contains(accuracy) {
                    return Err(KeyframeError::BadAccuracy(*accuracy));
                }
                let gt = gt_mplus.ok_or(KeyframeError::MissingInput {
                    strategy: "oracle_noisy",
                    missing: "ground-truth moments",
                })?;
                let mut rng = seeds::rng(seeds::derive_seed(*seed, video_id, expression_index as u64));
                Ok((1..=t_v)
                    .map(|f| {
                        let mut base = if gt.contains(f) { 1.0 } else { 0.0 };
                        if rng.gen_bool(1.0 - accuracy) {
                            base = 1.0 - base;
                        }
                        base + rng.gen_range(0.0..0.1)
                    })
                    .collect())
            }
            ScorerKind::UniformRandom { seed } => {
                let mut rng = seeds::rng(seeds::derive_seed(*seed, video_id, expression_index as u64));
                Ok((0..t_v).map(|_| rng.gen_range(0.0..1.0)).collect())
            }
            ScorerKind::External => {
                let table = self.table.as_ref().ok_or(KeyframeError::MissingInput {
                    strategy: "external",
                    missing: "score table",
                })?;
                (1..=t_v)
                    .map(|frame| {
                        table
                            .get(&(video_id.to_string(), expression_index, frame))
                            .copied()
                            .ok_or_else(|| KeyframeError::MissingScore {
                                video_id: video_id.to_string(),
                                expression_index,
                                frame,
                            })
                    })
                    .collect()
            }
        }
    }
}

/// The `k` highest-scoring frames (1-based), ties to the earlier frame, in
/// descending-score order. With an interval restriction the candidates are
/// limited to the listed segments; a short interval yields all of it.
pub fn select_topk(
    scores: &[f64],
    k: usize,
    interval: Option<&[[usize; 2]]>,
) -> Result<Vec<usize>, KeyframeError> {
    if k < 1 {
        return Err(KeyframeError::ZeroK);
    }
    let allowed = |frame: usize| match interval {
        None => true,
        Some(segments) => segments.iter().any(|s| s[0] <= frame && frame <= s[1]),
    };
    let mut candidates: Vec<usize> = (1..=scores.len()).filter(|&f| allowed(f)).collect();
    candidates.sort_by(|&a, &b| {
        scores[b - 1]
            .partial_cmp(&scores[a - 1])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    candidates.truncate(k);
    Ok(candidates)
}

/// Inference-time moment selection strategies. Externally tagged in JSON:
/// `"gt_moments"` or `{"topk": {"k": 4}}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionStrategy {
    /// Oracle setting: annotated moments drive the dual-path routing.
    GtMoments,
    /// Top-k scored frames become the relevant-set proxy.
    Topk { k: usize },
    /// Top-k restricted to a provided temporal interval.
    TopkInInterval { k: usize },
    /// Seeded uniform k-subset of frames.
    Random { k: usize, seed: u64 },
}

/// A resolved plan: the relevant-set proxy plus the order in which its
/// frames are processed first.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionPlan {
    pub proxy: MomentSet,
    /// Pass-one processing order over the proxy frames.
    pub priority: Vec<usize>,
}

impl SelectionPlan {
    /// Full processing order: proxy frames first (plan order), then the
    /// remaining frames by ascending distance to the proxy.
    pub fn full_order(&self) -> Vec<usize> {
        let mut order = self.priority.clone();
        order.extend(crate::memory::propagation_order(&self.proxy));
        order
    }
}

/// Resolve a strategy into a concrete plan for one expression.
pub fn build_plan(
    strategy: &SelectionStrategy,
    scores: Option<&[f64]>,
    gt_mplus: Option<&MomentSet>,
    interval: Option<&[[usize; 2]]>,
    t_v: usize,
) -> Result<SelectionPlan, KeyframeError> {
    let plan = match strategy {
        SelectionStrategy::GtMoments => {
            let gt = gt_mplus.ok_or(KeyframeError::MissingInput {
                strategy: "gt_moments",
                missing: "ground-truth moments",
            })?;
            SelectionPlan {
                proxy: gt.clone(),
                priority: gt.indices().to_vec(),
            }
        }
        SelectionStrategy::Topk { k } => {
            let scores = scores.ok_or(KeyframeError::MissingInput {
                strategy: "topk",
                missing: "frame scores",
            })?;
            let selected = select_topk(scores, *k, None)?;
            SelectionPlan {
                proxy: MomentSet::new(selected.clone(), t_v)?,
                priority: selected,
            }
        }
        SelectionStrategy::TopkInInterval { k } => {
            let scores = scores.ok_or(KeyframeError::MissingInput {
                strategy: "topk_in_interval",
                missing: "frame scores",
            })?;
            let interval = interval.ok_or(KeyframeError::MissingInput {
                strategy: "topk_in_interval",
                missing: "temporal interval",
            })?;
            let selected = select_topk(scores, *k, Some(interval))?;
            SelectionPlan {
                proxy: MomentSet::new(selected.clone(), t_v)?,
                priority: selected,
            }
        }
        SelectionStrategy::Random { k, seed } => {
            if *k < 1 {
                return Err(KeyframeError::ZeroK);
            }
            let mut rng = seeds::rng(*seed);
            let mut pool: Vec<usize> = (1..=t_v).collect();
            for i in 0..(*k).min(t_v) {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate((*k).min(t_v));
            pool.sort_unstable();
            SelectionPlan {
                proxy: MomentSet::new(pool.clone(), t_v)?,
                priority: pool,
            }
        }
    };
    // every plan must land on a non-empty proxy; fall back to the single
    // highest-scoring frame
    if plan.proxy.is_empty() {
        let best = scores
            .and_then(|s| select_topk(s, 1, None).ok())
            .and_then(|v| v.first().copied())
            .unwrap_or(1);
        return Ok(SelectionPlan {
            proxy: MomentSet::new(vec![best], t_v)?,
            priority: vec![best],
        });
    }
    Ok(plan)
}
