//! Evidential interactive segmentation: a small reverse-mode autodiff
//! engine, Dirichlet-based uncertainty, uncertainty-guided click
//! simulation, two-stage training and evaluation on synthetic speckled images.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod error;
pub mod evidential;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod selftest;
pub mod synthdata;

pub use error::{Error, Result};
