//! Self-distillation pretraining for small vision transformers, with
//! cross-view query-crop contrasting and one-way attention from query tokens
//! to image tokens.
//!
//! The guide in `book/` walks through each module; its code blocks are
//! compiled and run as doctests of this crate.

pub mod cli;
pub mod collapse;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod objective;
pub mod patchify;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/token-flow.md")]
    struct TokenFlow;
    #[doc = include_str!("../../../book/src/views.md")]
    struct Views;
    #[doc = include_str!("../../../book/src/objective.md")]
    struct Objective;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/collapse.md")]
    struct Collapse;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
