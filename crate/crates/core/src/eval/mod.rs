//! Segmentation and retrieval evaluation, plus the report document.

mod retrieval;
mod segmentation;

pub use retrieval::{
    average_precision, interval_iou, map_at_iou, map_threshold_grid, mean_average_precision,
    recall_at_iou, top1_keyframe_accuracy, RetrievalQuery, ScoredSegment,
};
pub use segmentation::{
    boundary_pixels, contour_accuracy, default_boundary_tolerance, jf_mean, region_similarity,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::BinaryMask;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask shape mismatch: pred {pred:?} vs gt {gt:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("query {query} has an empty prediction list")]
    EmptyPredictions { query: usize },
    #[error("expression {video_id}/{expression_index}: {got} predicted frames for {expected} annotated frames")]
    FrameCountMismatch {
        video_id: String,
        expression_index: usize,
        got: usize,
        expected: usize,
    },
}

/// Predicted and annotated masks of one expression, frame-aligned.
pub struct ExpressionEval {
    pub video_id: String,
    pub expression_index: usize,
    pub pred: Vec<BinaryMask>,
    pub gt: Vec<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionScores {
    pub video_id: String,
    pub expression_index: usize,
    /// Region similarity, contour accuracy, and their mean, all x100.
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
}

/// Mean J/F/J&F over the annotated frames of one expression.
pub fn evaluate_expression(item: &ExpressionEval, tol: usize) -> Result<ExpressionScores, EvalError> {
    if item.pred.len() != item.gt.len() || item.gt.is_empty() {
        return Err(EvalError::FrameCountMismatch {
            video_id: item.video_id.clone(),
            expression_index: item.expression_index,
            got: item.pred.len(),
            expected: item.gt.len(),
        });
    }
    let mut j_acc = 0.0;
    let mut f_acc = 0.0;
    for (p, g) in item.pred.iter().zip(&item.gt) {
        j_acc += region_similarity(p, g)?;
        f_acc += contour_accuracy(p, g, tol)?;
    }
    let n = item.pred.len() as f64;
    let j = j_acc / n;
    let f = f_acc / n;
    Ok(ExpressionScores {
        video_id: item.video_id.clone(),
        expression_index: item.expression_index,
        j: 100.0 * j,
        f: 100.0 * f,
        jf: 100.0 * jf_mean(j, f),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    #[serde(rename = "J")]
    pub j: Option<f64>,
    #[serde(rename = "F")]
    pub f: Option<f64>,
    #[serde(rename = "JF")]
    pub jf: Option<f64>,
    #[serde(rename = "R1_50")]
    pub r1_50: Option<f64>,
    #[serde(rename = "R1_70")]
    pub r1_70: Option<f64>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    #[serde(rename = "mAP_50")]
    pub map_50: Option<f64>,
    #[serde(rename = "mAP_75")]
    pub map_75: Option<f64>,
    pub top1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub build_id: String,
    pub config_hash: Option<String>,
    pub per_expression: Vec<ExpressionScores>,
    pub corpus: CorpusMetrics,
}

/// Segmentation metrics over a corpus; parallel per expression with an
/// ordered, deterministic reduction.
pub fn evaluate_segmentation(
    items: &[ExpressionEval],
    tol: usize,
) -> Result<Vec<ExpressionScores>, EvalError> {
    items
        .par_iter()
        .map(|item| evaluate_expression(item, tol))
        .collect()
}

/// Corpus means over per-expression scores.
pub fn corpus_means(scores: &[ExpressionScores]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if scores.is_empty() {
        return (None, None, None);
    }
    let n = scores.len() as f64;
    let j = scores.iter().map(|s| s.j).sum::<f64>() / n;
    let f = scores.iter().map(|s| s.f).sum::<f64>() / n;
    let jf = scores.iter().map(|s| s.jf).sum::<f64>() / n;
    (Some(j), Some(f), Some(jf))
}

/// Retrieval metrics (x100) from ranked interval predictions and the top-1
/// keyframe queries.
pub fn retrieval_metrics(
    queries: &[RetrievalQuery],
    top1_queries: &[(usize, &crate::moments::MomentSet)],
) -> Result<CorpusMetrics, EvalError> {
    let mut out = CorpusMetrics::default();
    if !queries.is_empty() {
        out.r1_50 = Some(100.0 * recall_at_iou(queries, 0.5)?);
        out.r1_70 = Some(100.0 * recall_at_iou(queries, 0.7)?);
        out.map = Some(100.0 * mean_average_precision(queries));
        out.map_50 = Some(100.0 * map_at_iou(queries, 0.5));
        out.map_75 = Some(100.0 * map_at_iou(queries, 0.75));
    }
    out.top1 = top1_keyframe_accuracy(top1_queries).map(|a| 100.0 * a);
    Ok(out)
}

impl EvalReport {
    /// Aligned plain-text table of the report.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:>7.2}"),
            None => format!("{:>7}", "-"),
        };
        out.push_str(&format!(
            "{:<24} {:>5} {:>7} {:>7} {:>7}\n",
            "video", "expr", "J", "F", "J&F"
        ));
        for s in &self.per_expression {
            out.push_str(&format!(
                "{:<24} {:>5} {:>7.2} {:>7.2} {:>7.2}\n",
                s.video_id, s.expression_index, s.j, s.f, s.jf
            ));
        }
        out.push_str(&format!(
            "corpus: J {} | F {} | J&F {} | R1@.5 {} | R1@.7 {} | mAP {} | mAP@.5 {} | mAP@.75 {} | top1 {}\n",
            fmt(self.corpus.j),
            fmt(self.corpus.f),
            fmt(self.corpus.jf),
            fmt(self.corpus.r1_50),
            fmt(self.corpus.r1_70),
            fmt(self.corpus.map),
            fmt(self.corpus.map_50),
            fmt(self.corpus.map_75),
            fmt(self.corpus.top1),
        ));
        out
    }
}
