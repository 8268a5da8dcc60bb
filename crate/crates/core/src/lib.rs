pub mod cli;
pub mod config;
pub mod dcc;
pub mod error;
pub mod eval;
pub mod gan;
pub mod gating;
pub mod gradcheck;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod voxel;

pub use error::{Error, Result};
