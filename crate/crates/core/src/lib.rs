//! Two-stage vision-language training for person re-identification.
//!
//! Stage 1 learns per-identity prompt vectors against a frozen text encoder.
//! Stage 2 fine-tunes the image encoder against the resulting text features.
//! See the guide under `book/` for a walkthrough.

pub mod autodiff;
pub mod error;
pub mod optim;
pub mod param;
pub mod schedule;
pub mod tensor;
pub mod nn;
pub mod rng;
pub mod text;
pub mod image;
pub mod losses;
pub mod data;
pub mod eval;
pub mod config;
pub mod train;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/getting-started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
