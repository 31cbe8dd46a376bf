//! Planning toolkit for training and serving long-context video diffusion
//! transformers: bucket geometry, activation memory, recomputation and
//! offload selection, parallel communication costs, step-time simulation
//! and inference schedules.

pub mod bucket;
pub mod comm;
pub mod config;
pub mod error;
pub mod infer;
pub mod memory;
pub mod offload;
pub mod recompute;
pub mod report;
pub mod sim;

pub use error::{PlanError, Result};
