//! Moment-retrieval metrics over closed frame intervals: top-1 recall at an
//! IoU threshold, mean average precision, and top-1 keyframe accuracy.

use crate::moments::MomentSet;

use super::EvalError;

/// Inclusive-interval IoU counted in frames.
pub fn interval_iou(a: [usize; 2], b: [usize; 2]) -> f64 {
    let inter_lo = a[0].max(b[0]);
    let inter_hi = a[1].min(b[1]);
    let inter = if inter_hi >= inter_lo {
        inter_hi - inter_lo + 1
    } else {
        0
    };
    let len_a = a[1] - a[0] + 1;
    let len_b = b[1] - b[0] + 1;
    let union = len_a + len_b - inter;
    inter as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSegment {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// One retrieval query: ranked predictions against ground-truth segments.
#[derive(Clone, Debug)]
pub struct RetrievalQuery {
    pub predictions: Vec<ScoredSegment>,
    pub gt: Vec<[usize; 2]>,
}

fn ranked(preds: &[ScoredSegment]) -> Vec<&ScoredSegment> {
    let mut order: Vec<&ScoredSegment> = preds.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    order
}

/// Fraction of queries whose top-scoring interval reaches IoU >= theta with
/// any ground-truth interval.
pub fn recall_at_iou(queries: &[RetrievalQuery], theta: f64) -> Result<f64, EvalError> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (qi, q) in queries.iter().enumerate() {
        let top = ranked(&q.predictions)
            .first()
            .copied()
            .cloned()
            .ok_or(EvalError::EmptyPredictions { query: qi })?;
        let best = q
            .gt
            .iter()
            .map(|&g| interval_iou([top.start, top.end], g))
            .fold(0.0, f64::max);
        if best >= theta {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Average precision of one query's ranked predictions at IoU >= theta with
/// one-to-one greedy matching (each prediction takes the best unmatched GT).
pub fn average_precision(query: &RetrievalQuery, theta: f64) -> f64 {
    if query.gt.is_empty() {
        return 0.0;
    }
    let order = ranked(&query.predictions);
    let mut matched = vec![false; query.gt.len()];
    let mut true_positives = 0usize;
    let mut precision_sum = 0.0;
    for (rank, pred) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, &g) in query.gt.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let iou = interval_iou([pred.start, pred.end], g);
            if iou >= theta && best.map(|(_, b)| iou > b).unwrap_or(true) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            true_positives += 1;
            precision_sum += true_positives as f64 / (rank + 1) as f64;
        }
    }
    precision_sum / query.gt.len() as f64
}

/// Mean AP over queries at one threshold.
pub fn map_at_iou(queries: &[RetrievalQuery], theta: f64) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    queries.iter().map(|q| average_precision(q, theta)).sum::<f64>() / queries.len() as f64
}

/// The standard averaging grid 0.50, 0.55, ..., 0.95.
pub fn map_threshold_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Mean of `map_at_iou` over the standard grid.
pub fn mean_average_precision(queries: &[RetrievalQuery]) -> f64 {
    let grid = map_threshold_grid();
    grid.iter().map(|&t| map_at_iou(queries, t)).sum::<f64>() / grid.len() as f64
}

/// Top-1 keyframe accuracy: the fraction of queries whose predicted most
/// relevant frame lies inside the annotated relevant set, excluding queries
/// whose relevant set spans the whole video. `None` when every query is
/// excluded.
pub fn top1_keyframe_accuracy(queries: &[(usize, &MomentSet)]) -> Option<f64> {
    let mut eligible = 0usize;
    let mut hits = 0usize;
    for &(frame, mplus) in queries {
        if mplus.is_full_span() {
            continue;
        }
        eligible += 1;
        if mplus.contains(frame) {
            hits += 1;
        }
    }
    if eligible == 0 {
        None
    } else {
        Some(hits as f64 / eligible as f64)
    }
}
