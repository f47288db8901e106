//! Joint appearance-motion flow matching on synthetic videos.
//!
//! A tiny diffusion transformer learns to generate 8-frame moving-shape
//! clips with flow matching, then is extended to predict optical flow (as an
//! RGB flow video) from the same latent. Sampling combines text-dropped and
//! flow-dropped branches with inner guidance, and the probes measure how much
//! the model relies on motion.
//!
//! The guide in `book/` walks through each stage with runnable examples.

pub mod cli;
pub mod config;
pub mod error;
pub mod flowfield;
pub mod flowmatch;
pub mod format;
pub mod guidance;
pub mod jamdit;
pub mod probes;
pub mod real;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/flow-encoding.md")]
    mod flow_encoding {}
    #[doc = include_str!("../../../book/src/flow-matching.md")]
    mod flow_matching {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/guidance.md")]
    mod guidance {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/probes.md")]
    mod probes {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
