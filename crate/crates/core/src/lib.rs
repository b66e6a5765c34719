#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoise_harness;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
