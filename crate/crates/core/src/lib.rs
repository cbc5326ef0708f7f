//! Desk-scale numerical core of a chest-radiograph report generation and
//! contrastive classification pipeline.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cliptrain;
pub mod corpusio;
pub mod detector;
pub mod detgeom;
pub mod downcls;
pub mod error;
pub mod genlm;
pub mod nlgmetrics;
pub mod nn;
pub mod optimkit;
pub mod params;
pub mod regionsel;
pub mod rng;

pub use error::{Error, Result};
