//! Type-aware link prediction over open knowledge graphs.
//!
//! A CaRE-style scorer with a bi-GRU phrase encoder and a ConvE predictor,
//! extended with an implicit type-compatibility score between candidate NPs
//! and a context vector taken from a masked language model. See the guide in
//! `book/` for a walkthrough of each stage.

pub mod autodiff;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod lm;
pub mod model;
pub mod params;
pub mod reports;
pub mod synthetic;
pub mod training;
pub mod typecomp;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    pub mod datasets {}
    #[doc = include_str!("../../../book/src/context.md")]
    pub mod context {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    pub mod scoring {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/reports.md")]
    pub mod reports {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
