//! Speaker-wise conditional end-to-end neural diarization.

pub mod activity;
pub mod decode;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod sim;

pub use activity::{ActivityMatrix, PosteriorMatrix};
pub use error::{Error, Result};
pub use model::{FeatureSequence, ModelConfig, ModelParams};
pub use numcore::Matrix;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/getting-started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
}
