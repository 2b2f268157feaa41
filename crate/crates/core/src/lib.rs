//! Simultaneous machine translation with Gaussian multi-head attention.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gma;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod policy;

pub use error::{Error, Result};
