//! On-disk schema for annotated synthetic videos: expressions, per-object
//! masks, per-object moments. One UTF-8 JSON document per dataset with
//! base64-embedded frame bytes and literal run-length arrays for masks.

mod rle;

pub use rle::{decode_mask_rle, encode_mask_rle, BinaryMask, RleMask};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::b64;
use crate::moments::{MomentAnnotation, MomentSet};

pub const FORMAT_VERSION: &str = "samdwich-m/1";

/// Reserved object id for video-level moments that apply to the whole
/// expression rather than a particular object.
pub const VIDEO_LEVEL_OBJECT: &str = "*";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("codec error: {context}")]
    Codec { context: String },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn schema_err(path: impl Into<String>, message: impl Into<String>) -> DatasetError {
    DatasetError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

/// Per-object annotation: one mask per frame (empty list for the reserved
/// video-level object) plus the raw moment indices.
///
/// Moment indices are kept as written in the file; range checking is a
/// validation finding, not a parse failure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectAnnotation {
    pub masks: Vec<BinaryMask>,
    pub moment: Vec<usize>,
}

impl ObjectAnnotation {
    pub fn moment_set(&self, video_length: usize) -> Result<MomentSet, crate::moments::MomentError> {
        MomentSet::new(self.moment.clone(), video_length)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpressionRecord {
    pub tokens: Vec<usize>,
    pub verb_indices: Vec<usize>,
    pub referred_object_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoSample {
    pub video_id: String,
    pub t_v: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    /// `t_v` frames of `h * w * channels` bytes, row-major with interleaved
    /// channels.
    pub frames: Vec<Vec<u8>>,
    pub objects: BTreeMap<String, ObjectAnnotation>,
    pub expressions: Vec<ExpressionRecord>,
}

impl VideoSample {
    /// Moment annotation over the real (non-reserved) objects.
    pub fn moment_annotation(&self) -> Result<MomentAnnotation, crate::moments::MomentError> {
        let mut map = BTreeMap::new();
        for (id, obj) in &self.objects {
            if id == VIDEO_LEVEL_OBJECT {
                continue;
            }
            map.insert(id.clone(), obj.moment_set(self.t_v)?);
        }
        MomentAnnotation::new(map, self.t_v)
    }

    /// M+ for one expression: the union of its referred objects' moments,
    /// together with the video-level set when present.
    pub fn expression_mplus(&self, expression: &ExpressionRecord) -> Result<MomentSet, DatasetError> {
        let mut mplus = MomentSet::empty(self.t_v).map_err(|e| DatasetError::Codec {
            context: e.to_string(),
        })?;
        for id in &expression.referred_object_ids {
            let obj = self.objects.get(id).ok_or_else(|| DatasetError::Codec {
                context: format!("expression refers to unknown object {id}"),
            })?;
            let set = obj.moment_set(self.t_v).map_err(|e| DatasetError::Codec {
                context: format!("object {id}: {e}"),
            })?;
            mplus = mplus.union_with(&set).map_err(|e| DatasetError::Codec {
                context: e.to_string(),
            })?;
        }
        if let Some(star) = self.objects.get(VIDEO_LEVEL_OBJECT) {
            let set = star.moment_set(self.t_v).map_err(|e| DatasetError::Codec {
                context: format!("video-level moment: {e}"),
            })?;
            mplus = mplus.union_with(&set).map_err(|e| DatasetError::Codec {
                context: e.to_string(),
            })?;
        }
        Ok(mplus)
    }

    /// Ground-truth mask for an expression at a frame: pixelwise OR over all
    /// referred objects.
    pub fn expression_target(&self, expression: &ExpressionRecord, frame: usize) -> Result<BinaryMask, DatasetError> {
        let mut out = BinaryMask::zeros(self.h, self.w);
        for id in &expression.referred_object_ids {
            let obj = self.objects.get(id).ok_or_else(|| DatasetError::Codec {
                context: format!("expression refers to unknown object {id}"),
            })?;
            if let Some(mask) = obj.masks.get(frame - 1) {
                for (o, &m) in out.pixels.iter_mut().zip(&mask.pixels) {
                    *o |= m;
                }
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RawDataset {
    format_version: String,
    videos: Vec<RawVideo>,
}

#[derive(Serialize, Deserialize)]
struct RawVideo {
    video_id: String,
    #[serde(rename = "T_V")]
    t_v: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    frames: Vec<String>,
    objects: BTreeMap<String, RawObject>,
    expressions: Vec<RawExpression>,
}

#[derive(Serialize, Deserialize)]
struct RawObject {
    masks: Vec<RleMask>,
    moment: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawExpression {
    tokens: Vec<usize>,
    verb_indices: Vec<usize>,
    referred_object_ids: Vec<String>,
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Vec<VideoSample>, DatasetError> {
    let raw: RawDataset = serde_json::from_slice(bytes)?;
    if raw.format_version != FORMAT_VERSION {
        return Err(schema_err(
            "format_version",
            format!("expected \"{FORMAT_VERSION}\", got \"{}\"", raw.format_version),
        ));
    }
    let mut samples = Vec::with_capacity(raw.videos.len());
    for (vi, video) in raw.videos.into_iter().enumerate() {
        samples.push(parse_video(video, vi)?);
    }
    Ok(samples)
}

fn parse_video(video: RawVideo, vi: usize) -> Result<VideoSample, DatasetError> {
    let vpath = format!("videos[{vi}]");
    if video.t_v == 0 {
        return Err(schema_err(format!("{vpath}.T_V"), "video length must be positive"));
    }
    if video.h == 0 || video.w == 0 {
        return Err(schema_err(format!("{vpath}.H"), "spatial size must be positive"));
    }
    if video.frames.len() != video.t_v {
        return Err(schema_err(
            format!("{vpath}.frames"),
            format!("expected {} frames, got {}", video.t_v, video.frames.len()),
        ));
    }

    let plane = video.h * video.w;
    let mut channels = None;
    let mut frames = Vec::with_capacity(video.t_v);
    for (fi, text) in video.frames.iter().enumerate() {
        let bytes = b64::decode_bytes(text)
            .map_err(|e| schema_err(format!("{vpath}.frames[{fi}]"), e))?;
        if bytes.is_empty() || bytes.len() % plane != 0 {
            return Err(schema_err(
                format!("{vpath}.frames[{fi}]"),
                format!("frame byte count {} is not a positive multiple of H*W={plane}", bytes.len()),
            ));
        }
        let c = bytes.len() / plane;
        match channels {
            None => channels = Some(c),
            Some(prev) if prev != c => {
                return Err(schema_err(
                    format!("{vpath}.frames[{fi}]"),
                    format!("channel count {c} differs from earlier frames ({prev})"),
                ))
            }
            _ => {}
        }
        frames.push(bytes);
    }
    let channels = channels.expect("t_v > 0 guarantees at least one frame");

    let mut objects = BTreeMap::new();
    for (id, obj) in video.objects {
        let opath = format!("{vpath}.objects.{id}");
        let mut masks = Vec::with_capacity(obj.masks.len());
        if !obj.masks.is_empty() && obj.masks.len() != video.t_v {
            return Err(schema_err(
                format!("{opath}.masks"),
                format!("expected {} masks (one per frame) or none, got {}", video.t_v, obj.masks.len()),
            ));
        }
        for (mi, rle) in obj.masks.iter().enumerate() {
            if rle.h != video.h || rle.w != video.w {
                return Err(schema_err(
                    format!("{opath}.masks[{mi}]"),
                    format!("mask size {}x{} differs from frame size {}x{}", rle.h, rle.w, video.h, video.w),
                ));
            }
            let mask = decode_mask_rle(rle)
                .map_err(|e| schema_err(format!("{opath}.masks[{mi}]"), e.to_string()))?;
            masks.push(mask);
        }
        objects.insert(
            id,
            ObjectAnnotation {
                masks,
                moment: obj.moment,
            },
        );
    }

    let mut expressions = Vec::with_capacity(video.expressions.len());
    for (ei, expr) in video.expressions.into_iter().enumerate() {
        let epath = format!("{vpath}.expressions[{ei}]");
        if expr.tokens.is_empty() {
            return Err(schema_err(format!("{epath}.tokens"), "expression must have at least one token"));
        }
        if expr.referred_object_ids.is_empty() {
            return Err(schema_err(
                format!("{epath}.referred_object_ids"),
                "expression must refer to at least one object",
            ));
        }
        for &v in &expr.verb_indices {
            if v < 1 || v > expr.tokens.len() {
                return Err(schema_err(
                    format!("{epath}.verb_indices"),
                    format!("verb index {v} out of range 1..={}", expr.tokens.len()),
                ));
            }
        }
        for id in &expr.referred_object_ids {
            if !objects.contains_key(id) {
                return Err(schema_err(
                    format!("{epath}.referred_object_ids"),
                    format!("referred object {id} is not annotated in this video"),
                ));
            }
        }
        expressions.push(ExpressionRecord {
            tokens: expr.tokens,
            verb_indices: expr.verb_indices,
            referred_object_ids: expr.referred_object_ids,
        });
    }

    Ok(VideoSample {
        video_id: video.video_id,
        t_v: video.t_v,
        h: video.h,
        w: video.w,
        channels,
        frames,
        objects,
        expressions,
    })
}

pub fn write_dataset(samples: &[VideoSample]) -> Result<Vec<u8>, DatasetError> {
    let raw = RawDataset {
        format_version: FORMAT_VERSION.to_string(),
        videos: samples
            .iter()
            .map(|s| RawVideo {
                video_id: s.video_id.clone(),
                t_v: s.t_v,
                h: s.h,
                w: s.w,
                frames: s.frames.iter().map(|f| b64::encode_bytes(f)).collect(),
                objects: s
                    .objects
                    .iter()
                    .map(|(id, obj)| {
                        (
                            id.clone(),
                            RawObject {
                                masks: obj.masks.iter().map(encode_mask_rle).collect(),
                                moment: obj.moment.clone(),
                            },
                        )
                    })
                    .collect(),
                expressions: s
                    .expressions
                    .iter()
                    .map(|e| RawExpression {
                        tokens: e.tokens.clone(),
                        verb_indices: e.verb_indices.clone(),
                        referred_object_ids: e.referred_object_ids.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_vec_pretty(&raw)?)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    /// A referred object has an all-empty mask on every frame of its moment.
    EmptyMasksOnMoment,
    /// A moment index falls outside `1..=T_V`.
    MomentOutOfRange,
    /// Every referred object of an expression has an empty moment set.
    ExpressionWithoutMoments,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub video_id: String,
    pub kind: ViolationKind,
    pub detail: String,
}

/// Pure scan for annotation defects; never fails and never mutates.
pub fn validate_dataset(samples: &[VideoSample]) -> Vec<Violation> {
    let mut out = Vec::new();
    for sample in samples {
        for (id, obj) in &sample.objects {
            for &m in &obj.moment {
                if m < 1 || m > sample.t_v {
                    out.push(Violation {
                        video_id: sample.video_id.clone(),
                        kind: ViolationKind::MomentOutOfRange,
                        detail: format!("object {id}: moment index {m} outside 1..={}", sample.t_v),
                    });
                }
            }
        }
        let has_video_level_moment = sample
            .objects
            .get(VIDEO_LEVEL_OBJECT)
            .map(|o| !o.moment.is_empty())
            .unwrap_or(false);
        for (ei, expr) in sample.expressions.iter().enumerate() {
            let mut any_moment = false;
            for id in &expr.referred_object_ids {
                let obj = match sample.objects.get(id) {
                    Some(o) => o,
                    None => continue,
                };
                let in_range: Vec<usize> = obj
                    .moment
                    .iter()
                    .copied()
                    .filter(|&m| m >= 1 && m <= sample.t_v)
                    .collect();
                if !in_range.is_empty() {
                    any_moment = true;
                }
                if !obj.masks.is_empty()
                    && !in_range.is_empty()
                    && in_range.iter().all(|&m| obj.masks[m - 1].is_empty_mask())
                {
                    out.push(Violation {
                        video_id: sample.video_id.clone(),
                        kind: ViolationKind::EmptyMasksOnMoment,
                        detail: format!(
                            "expression {ei}: object {id} has empty masks on every frame of its moment"
                        ),
                    });
                }
            }
            if !any_moment && !has_video_level_moment {
                out.push(Violation {
                    video_id: sample.video_id.clone(),
                    kind: ViolationKind::ExpressionWithoutMoments,
                    detail: format!("expression {ei}: all referred objects have empty moment sets"),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal_sample() -> VideoSample {
        let mask = BinaryMask::new(2, 2, vec![0, 1, 0, 0]).unwrap();
        let mut objects = BTreeMap::new();
        objects.insert(
            "1".to_string(),
            ObjectAnnotation {
                masks: vec![mask],
                moment: vec![1],
            },
        );
        VideoSample {
            video_id: "v0".to_string(),
            t_v: 1,
            h: 2,
            w: 2,
            channels: 3,
            frames: vec![vec![7u8; 12]],
            objects,
            expressions: vec![ExpressionRecord {
                tokens: vec![1, 2, 3],
                verb_indices: vec![3],
                referred_object_ids: vec!["1".to_string()],
            }],
        }
    }

    #[test]
    fn minimal_sample_round_trips() {
        let sample = minimal_sample();
        let bytes = write_dataset(&[sample.clone()]).unwrap();
        let parsed = parse_dataset(&bytes).unwrap();
        assert_eq!(parsed, vec![sample]);
    }

    #[test]
    fn worked_example_moments_round_trip() {
        let mut sample = minimal_sample();
        sample.t_v = 5;
        sample.frames = vec![vec![0u8; 12]; 5];
        let mask = BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        sample.objects.insert(
            "1".to_string(),
            ObjectAnnotation {
                masks: vec![mask.clone(); 5],
                moment: vec![1, 2, 3],
            },
        );
        sample.objects.insert(
            "2".to_string(),
            ObjectAnnotation {
                masks: vec![mask; 5],
                moment: vec![3, 5],
            },
        );
        let bytes = write_dataset(&[sample.clone()]).unwrap();
        let parsed = parse_dataset(&bytes).unwrap();
        assert_eq!(parsed[0].objects["1"].moment, vec![1, 2, 3]);
        assert_eq!(parsed[0].objects["2"].moment, vec![3, 5]);
        let ann = parsed[0].moment_annotation().unwrap();
        let mplus = crate::moments::moment_union(&ann).unwrap();
        assert_eq!(mplus.indices(), &[1, 2, 3, 5]);
    }

    #[test]
    fn format_version_is_enforced() {
        let sample = minimal_sample();
        let bytes = write_dataset(&[sample]).unwrap();
        let text = String::from_utf8(bytes)
            .unwrap()
            .replace(FORMAT_VERSION, "samdwich-m/2");
        let err = parse_dataset(text.as_bytes()).unwrap_err();
        match err {
            DatasetError::Schema { path, .. } => assert_eq!(path, "format_version"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_error_names_offending_field() {
        let mut sample = minimal_sample();
        sample.expressions[0].verb_indices = vec![9];
        let bytes = write_dataset(&[sample]).unwrap();
        let err = parse_dataset(&bytes).unwrap_err();
        match err {
            DatasetError::Schema { path, .. } => {
                assert_eq!(path, "videos[0].expressions[0].verb_indices")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clean_sample_has_no_violations() {
        assert!(validate_dataset(&[minimal_sample()]).is_empty());
    }

    #[test]
    fn empty_mask_on_moment_is_reported() {
        let mut sample = minimal_sample();
        sample.t_v = 3;
        sample.frames = vec![vec![0u8; 12]; 3];
        let empty = BinaryMask::zeros(2, 2);
        sample.objects.insert(
            "1".to_string(),
            ObjectAnnotation {
                masks: vec![empty.clone(), empty.clone(), empty],
                moment: vec![3],
            },
        );
        let violations = validate_dataset(&[sample]);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].kind, ViolationKind::EmptyMasksOnMoment);
    }

    #[test]
    fn validation_is_pure() {
        let samples = vec![minimal_sample()];
        let before = samples.clone();
        let _ = validate_dataset(&samples);
        assert_eq!(samples, before);
    }

    #[test]
    fn seeded_defects_are_all_found() {
        let mut samples: Vec<VideoSample> = (0..5)
            .map(|i| {
                let mut s = minimal_sample();
                s.video_id = format!("v{i}");
                s
            })
            .collect();
        // defect 1-2: out-of-range moments (a valid index remains, so nothing cascades)
        samples[0].objects.get_mut("1").unwrap().moment = vec![1, 9];
        samples[1].objects.get_mut("1").unwrap().moment = vec![0, 1];
        // defect 3: empty masks over the whole moment
        samples[2].objects.get_mut("1").unwrap().masks = vec![BinaryMask::zeros(2, 2)];
        // defect 4-5: expressions whose referred objects have no moments
        samples[3].objects.get_mut("1").unwrap().moment = vec![];
        samples[4].objects.get_mut("1").unwrap().moment = vec![];
        let violations = validate_dataset(&samples);
        assert_eq!(violations.len(), 5);
        let kinds: Vec<_> = violations.iter().map(|v| v.kind.clone()).collect();
        assert_eq!(
            kinds.iter().filter(|k| **k == ViolationKind::MomentOutOfRange).count(),
            2
        );
        assert_eq!(
            kinds.iter().filter(|k| **k == ViolationKind::EmptyMasksOnMoment).count(),
            1
        );
        assert_eq!(
            kinds
                .iter()
                .filter(|k| **k == ViolationKind::ExpressionWithoutMoments)
                .count(),
            2
        );
    }

    #[test]
    fn video_level_moment_backs_expressions_without_object_moments() {
        let mut sample = minimal_sample();
        sample.objects.get_mut("1").unwrap().moment = vec![];
        sample.objects.insert(
            VIDEO_LEVEL_OBJECT.to_string(),
            ObjectAnnotation {
                masks: vec![],
                moment: vec![1],
            },
        );
        assert!(validate_dataset(&[sample.clone()]).is_empty());
        let expr = sample.expressions[0].clone();
        let mplus = sample.expression_mplus(&expr).unwrap();
        assert_eq!(mplus.indices(), &[1]);
    }
}
