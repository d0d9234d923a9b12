//! Source-free open-set domain adaptation over feature vectors.
//!
//! A source-trained classifier is extended with private prototype columns,
//! initialised by clustering the target features, and adapted with refined,
//! uncertainty-filtered pseudo-labels.

pub mod bank;
pub mod checkpoint;
pub mod cluster_init;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod pseudo;
pub mod report;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::Model;
pub use numerics::{Rng, Stream};
