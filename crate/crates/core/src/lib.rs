//! Feature hallucination for few-shot classification.
//!
//! Stages: a cosine classifier is fit on base classes; a conditional feature
//! generator is fit with an entropic transport loss between real features and
//! clustered synthetic ones; novel classes are then learned from a handful of
//! shots plus generated features.

pub mod cli;
pub mod clustering;
pub mod dataio;
pub mod error;
pub mod nnet;
pub mod numerics;
pub mod pipeline;
pub mod transport;

pub use error::{Error, Result};
