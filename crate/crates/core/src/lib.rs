//! Referring expression comprehension by mutual visual-textual guidance.
//!
//! A region and an expression are matched in three modules (subject,
//! location, relationship). Within each module, visual features guide a
//! reweighting of the words and the phrase guides an attention over visual
//! elements; both matches are scored and summed, and the modules are combined
//! with expression-dependent weights. Everything runs on a small tape-based
//! reverse-mode differentiation core in `f64`.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod language;
pub mod matching;
pub mod params;
pub mod reference;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod visual;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use matching::{Ablation, Guidance};
pub use params::{ModelConfig, ModelParams, Module};
pub use tensor::{ParamSet, Tensor};
