//! Desk-scale laboratory around `excitor-core`: checkpoint and feature file
//! formats, run configuration, the training and evaluation harness, charts
//! and the `excitor` command-line tool.

pub mod ckpt;
pub mod commands;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod svg;

pub use error::{FormatError, LabError, Result};
