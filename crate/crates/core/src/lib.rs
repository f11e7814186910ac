#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::excessive_precision
)]

pub mod artifact;
pub mod centile;
pub mod curation;
pub mod data;
pub mod dist;
pub mod engine;
pub mod error;
pub mod fixture;
pub mod fp;
pub mod longitudinal;
pub mod pipeline;
pub mod reports;
pub mod special;
pub mod synthetic;

pub use error::{Error, Result};
