//! Desk-scale laboratory for locating zero-shot cross-lingual transfer inside
//! small masked-LM encoders.
//!
//! The crate pretrains a small transformer encoder on a family of synthetic
//! parallel languages, fine-tunes it on tagging / NER / parsing, selectively
//! re-initializes pretrained layer blocks before fine-tuning, measures
//! per-layer cross-lingual representation similarity (CKA), and correlates
//! similarity with transfer quality. Everything is deterministic in its seeds
//! and runs on a CPU in minutes.

pub mod ablation;
pub mod data;
pub mod model;
pub mod report;
pub mod rng;
pub mod similarity;
pub mod tensor;
pub mod train;
