//! Synthetic scenes, training and tracking loops, checkpoints and diagnostics for the
//! `mmtrack` tracker.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod scene;
pub mod track;
pub mod train;

pub use error::{HarnessError, Result};
