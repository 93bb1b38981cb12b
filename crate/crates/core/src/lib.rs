//! Point cloud upsampling with a bi-directional multi-scale expansion
//! network, built on a small reverse-mode tensor engine.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod bims;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod extractor;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
