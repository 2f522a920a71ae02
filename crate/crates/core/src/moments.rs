//! Set algebra over per-object text-relevant moments.
//!
//! Frame indices are 1-based to match the dataset files. A moment set may be
//! non-contiguous, so the sorted index set (not an interval) is the canonical
//! representation; intervals are derived views.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MomentError {
    #[error("frame index {index} out of range 1..={video_length}")]
    IndexOutOfRange { index: usize, video_length: usize },
    #[error("video length must be positive")]
    ZeroVideoLength,
    #[error("inconsistent video length: expected {expected}, got {got}")]
    InconsistentVideoLength { expected: usize, got: usize },
    #[error("annotation has no objects")]
    EmptyAnnotation,
}

/// Sorted, deduplicated set of 1-based frame indices bounded by the video
/// length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentSet {
    indices: Vec<usize>,
    video_length: usize,
}

impl MomentSet {
    pub fn new(mut indices: Vec<usize>, video_length: usize) -> Result<Self, MomentError> {
        if video_length == 0 {
            return Err(MomentError::ZeroVideoLength);
        }
        indices.sort_unstable();
        indices.dedup();
        for &i in &indices {
            if i < 1 || i > video_length {
                return Err(MomentError::IndexOutOfRange {
                    index: i,
                    video_length,
                });
            }
        }
        Ok(MomentSet {
            indices,
            video_length,
        })
    }

    pub fn empty(video_length: usize) -> Result<Self, MomentError> {
        MomentSet::new(Vec::new(), video_length)
    }

    pub fn full(video_length: usize) -> Result<Self, MomentError> {
        MomentSet::new((1..=video_length).collect(), video_length)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn video_length(&self) -> usize {
        self.video_length
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_full_span(&self) -> bool {
        self.indices.len() == self.video_length
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.indices.binary_search(&frame).is_ok()
    }

    pub fn union_with(&self, other: &MomentSet) -> Result<MomentSet, MomentError> {
        if self.video_length != other.video_length {
            return Err(MomentError::InconsistentVideoLength {
                expected: self.video_length,
                got: other.video_length,
            });
        }
        let mut merged = self.indices.clone();
        merged.extend_from_slice(&other.indices);
        MomentSet::new(merged, self.video_length)
    }

    /// Distance to the nearest member frame; `None` for an empty set.
    pub fn distance_to(&self, frame: usize) -> Option<usize> {
        self.indices
            .iter()
            .map(|&i| i.abs_diff(frame))
            .min()
    }
}

/// Per-object moment sets of one (video, expression) annotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentAnnotation {
    per_object: BTreeMap<String, MomentSet>,
    video_length: usize,
}

impl MomentAnnotation {
    pub fn new(
        per_object: BTreeMap<String, MomentSet>,
        video_length: usize,
    ) -> Result<Self, MomentError> {
        if video_length == 0 {
            return Err(MomentError::ZeroVideoLength);
        }
        for set in per_object.values() {
            if set.video_length() != video_length {
                return Err(MomentError::InconsistentVideoLength {
                    expected: video_length,
                    got: set.video_length(),
                });
            }
        }
        Ok(MomentAnnotation {
            per_object,
            video_length,
        })
    }

    pub fn video_length(&self) -> usize {
        self.video_length
    }

    pub fn objects(&self) -> impl Iterator<Item = (&str, &MomentSet)> {
        self.per_object.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, object_id: &str) -> Option<&MomentSet> {
        self.per_object.get(object_id)
    }

    pub fn is_empty(&self) -> bool {
        self.per_object.is_empty()
    }
}

/// M+ as the union of all per-object moment sets.
pub fn moment_union(ann: &MomentAnnotation) -> Result<MomentSet, MomentError> {
    if ann.per_object.is_empty() {
        return Err(MomentError::EmptyAnnotation);
    }
    let mut merged: Vec<usize> = Vec::new();
    for set in ann.per_object.values() {
        merged.extend_from_slice(set.indices());
    }
    MomentSet::new(merged, ann.video_length)
}

/// M- as the complement of M+ in `{1..T_V}`.
pub fn moment_complement(mplus: &MomentSet) -> MomentSet {
    let mut out = Vec::with_capacity(mplus.video_length - mplus.len());
    let mut member = mplus.indices().iter().peekable();
    for frame in 1..=mplus.video_length {
        match member.peek() {
            Some(&&next) if next == frame => {
                member.next();
            }
            _ => out.push(frame),
        }
    }
    MomentSet {
        indices: out,
        video_length: mplus.video_length,
    }
}

/// Whether a sampled clip intersects a moment set.
pub fn overlaps(clip: &[usize], m: &MomentSet) -> Result<bool, MomentError> {
    for &frame in clip {
        if frame < 1 || frame > m.video_length() {
            return Err(MomentError::IndexOutOfRange {
                index: frame,
                video_length: m.video_length(),
            });
        }
    }
    Ok(clip.iter().any(|&f| m.contains(f)))
}

/// Maximal runs of consecutive indices as closed `[start, end]` intervals.
pub fn set_to_segments(m: &MomentSet) -> Vec<[usize; 2]> {
    let mut out = Vec::new();
    let mut iter = m.indices().iter().copied();
    let first = match iter.next() {
        Some(f) => f,
        None => return out,
    };
    let mut start = first;
    let mut prev = first;
    for i in iter {
        if i == prev + 1 {
            prev = i;
        } else {
            out.push([start, prev]);
            start = i;
            prev = i;
        }
    }
    out.push([start, prev]);
    out
}

/// Inverse of [`set_to_segments`].
pub fn segments_to_set(segments: &[[usize; 2]], video_length: usize) -> Result<MomentSet, MomentError> {
    let mut indices = Vec::new();
    for seg in segments {
        if seg[0] > seg[1] {
            return Err(MomentError::IndexOutOfRange {
                index: seg[0],
                video_length,
            });
        }
        indices.extend(seg[0]..=seg[1]);
    }
    MomentSet::new(indices, video_length)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(indices: &[usize], t_v: usize) -> MomentSet {
        MomentSet::new(indices.to_vec(), t_v).unwrap()
    }

    fn annotation(objects: &[(&str, &[usize])], t_v: usize) -> MomentAnnotation {
        let map = objects
            .iter()
            .map(|(id, idx)| (id.to_string(), ms(idx, t_v)))
            .collect();
        MomentAnnotation::new(map, t_v).unwrap()
    }

    #[test]
    fn union_of_worked_example() {
        let ann = annotation(&[("1", &[1, 2, 3]), ("2", &[3, 5])], 5);
        let mplus = moment_union(&ann).unwrap();
        assert_eq!(mplus.indices(), &[1, 2, 3, 5]);
        assert_eq!(mplus.video_length(), 5);
    }

    #[test]
    fn union_of_single_object() {
        let ann = annotation(&[("1", &[2])], 4);
        assert_eq!(moment_union(&ann).unwrap().indices(), &[2]);
    }

    #[test]
    fn complement_of_worked_example() {
        let mminus = moment_complement(&ms(&[1, 2, 3, 5], 5));
        assert_eq!(mminus.indices(), &[4]);
    }

    #[test]
    fn complement_of_empty_is_full() {
        let mminus = moment_complement(&ms(&[], 3));
        assert_eq!(mminus.indices(), &[1, 2, 3]);
    }

    #[test]
    fn complement_of_full_span_is_empty() {
        let full = MomentSet::full(6).unwrap();
        assert!(full.is_full_span());
        assert!(moment_complement(&full).is_empty());
    }

    #[test]
    fn overlaps_matches_examples() {
        assert!(overlaps(&[2, 4], &ms(&[4, 7], 8)).unwrap());
        assert!(!overlaps(&[1, 2], &ms(&[5], 6)).unwrap());
    }

    #[test]
    fn overlaps_rejects_out_of_range_clip() {
        let err = overlaps(&[9], &ms(&[1], 8)).unwrap_err();
        assert_eq!(
            err,
            MomentError::IndexOutOfRange {
                index: 9,
                video_length: 8
            }
        );
    }

    #[test]
    fn segments_of_worked_example() {
        assert_eq!(set_to_segments(&ms(&[1, 2, 3, 5], 5)), vec![[1, 3], [5, 5]]);
        assert!(set_to_segments(&ms(&[], 5)).is_empty());
    }

    #[test]
    fn inconsistent_video_length_is_rejected() {
        let mut map = BTreeMap::new();
        map.insert("1".to_string(), ms(&[1], 5));
        map.insert("2".to_string(), ms(&[2], 7));
        let err = MomentAnnotation::new(map, 5).unwrap_err();
        assert_eq!(
            err,
            MomentError::InconsistentVideoLength {
                expected: 5,
                got: 7
            }
        );
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let err = MomentSet::new(vec![0], 4).unwrap_err();
        assert_eq!(
            err,
            MomentError::IndexOutOfRange {
                index: 0,
                video_length: 4
            }
        );
        let err = MomentSet::new(vec![5], 4).unwrap_err();
        assert_eq!(
            err,
            MomentError::IndexOutOfRange {
                index: 5,
                video_length: 4
            }
        );
    }
}
