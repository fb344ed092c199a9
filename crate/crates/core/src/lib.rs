//! Idempotent experience replay for class-incremental continual learning.

pub mod buffer;
pub mod data;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod streams;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
