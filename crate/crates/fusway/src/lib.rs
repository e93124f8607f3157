//! Audio-visual upstream fusion for rail defect detection.
//!
//! The pipeline: a detector backbone's feature map is squeezed, normalized,
//! and repeated per class; synthesized audio-analyser events are quantized
//! onto feature rows and expanded into a per-class audio tensor; a detection
//! mask restricts everything to the detected region; and a small Vision
//! Transformer classifies the fused product. Evaluation runs one-against-all
//! over an IoU grid at two stages (detector states, then classifier-refined
//! states) and compares variants with Student's unpaired t-test over Z
//! random re-splits.
//!
//! See the `book/` guide for the concepts chapter by chapter, or start from
//! [`pipeline::RunConfig`] and [`pipeline::run_experiment`].

pub mod audio;
pub mod autodiff;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod fusion;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};

// The guide's code snippets compile and run as doc-tests so the book can
// never drift from the library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }
    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(Scenes, "../../../book/src/scenes.md");
    chapter!(AudioModel, "../../../book/src/audio-model.md");
    chapter!(Fusion, "../../../book/src/fusion.md");
    chapter!(Autodiff, "../../../book/src/autodiff.md");
    chapter!(Transformer, "../../../book/src/transformer.md");
    chapter!(Evaluation, "../../../book/src/evaluation.md");
    chapter!(Cli, "../../../book/src/cli.md");
}
