//! Moment-aware referring video object segmentation at desk scale.
//!
//! The crate wires together a small reverse-mode tensor engine, moment set
//! algebra, a JSON dataset container, frozen toy encoders, a cross-modal
//! adapter, dual-path memory propagation, selective-supervision training,
//! keyframe selection strategies, segmentation/retrieval metrics, and a
//! deterministic synthetic benchmark.

pub mod adapter;
pub mod b64;
pub mod dataset;
pub mod encoders;
pub mod eval;
pub mod harness;
pub mod keyframe;
pub mod memory;
pub mod moments;
pub mod params;
pub mod pipeline;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod training;
