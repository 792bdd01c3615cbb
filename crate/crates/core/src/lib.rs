#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod autodiff;
pub mod critic;
pub mod denoiser;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod mpnn;
pub mod noising;
pub mod prob;
pub mod samplers;
pub mod verify;

pub use error::{Error, Result};
