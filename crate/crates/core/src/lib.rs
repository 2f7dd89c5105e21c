//! Open-vocabulary detection tooling: text-embedding classifiers over
//! region proposals, distillation of an image encoder into a region head,
//! score ensembling, NMS and COCO/LVIS-style evaluation.

pub mod classifier;
pub mod config;
pub mod detection;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod postprocess;
pub mod prompts;
pub mod training;
pub mod vocab;

pub use error::{Result, VildError};
