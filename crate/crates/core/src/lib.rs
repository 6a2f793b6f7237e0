//! Next-scale-prediction image editing at desk scale.
//!
//! The crate provides a multi-scale residual image tokenizer, a
//! scale-conditioned autoregressive transformer with three source
//! conditioning strategies (full, finest, scale-aligned reference), a
//! synthetic instruction-edit corpus generator, classifier-free-guided
//! inference, and the evaluation and attention-analysis tooling around
//! them.

pub mod attention;
pub mod checkpoint;
pub mod codec;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod img;
pub mod inference;
pub mod model;
pub mod pipeline;
pub mod resample;
pub mod rng;
pub mod runcfg;
pub mod rope;
pub mod schedule;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use schedule::{ScaleSchedule, SequenceLayout, Strategy};
