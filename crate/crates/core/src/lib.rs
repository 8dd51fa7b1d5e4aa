//! Image captioning with joint word-region attention over activation-grid,
//! proposal and spatial-transformer regions, on synthetic scenes.

// `!(x > 0.0)` style checks deliberately reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod params;
pub mod regions;
pub mod rng;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
