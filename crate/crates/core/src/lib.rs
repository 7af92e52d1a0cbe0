//! Unified dense-transformer perception toolkit.
//!
//! One token stream carries image patches, a text prompt and the
//! per-instance `<coord> <size> <seg>` chain. This crate provides the
//! serialization and masking rules, positional encodings, a small
//! autodiff engine with the model and its losses, the evaluation
//! protocol, and a synthetic shapes corpus for end-to-end runs.

pub mod geometry;
pub mod seqformat;
pub mod posenc;
pub mod tensor;
pub mod autograd;
pub mod model;
pub mod evalkit;
pub mod synthdata;
pub mod training;
pub mod selfcheck;
