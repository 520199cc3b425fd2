// Index loops mirror the tensor math; NaN-rejecting checks use negated comparisons.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod denoiser;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod segmentor;
pub mod schedule;
pub mod shapesworld;

pub use error::{Error, Result};
pub use grid::{ImageGrid, LabelGrid};
