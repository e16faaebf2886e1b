//! Multi-dataset semantic segmentation under label shift.

pub mod commands;
pub mod conflict;
pub mod dump;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod grid;
pub mod labelspace;
pub mod losses;
pub mod model;
pub mod relations;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
