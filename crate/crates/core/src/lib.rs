//! Evaluation harness for geospatial embeddings.
//!
//! Heterogeneous representations (rasters, hex-cell tables, entity point
//! sets, coordinate encoders) are aligned onto the units of a task dataset,
//! split into train/validation/test by spatial blocks, probed with a fixed
//! downstream head, scored, and aggregated across seeds, cities and tasks.
//!
//! The [`synth`] module generates autocorrelated synthetic cities so that
//! every stage can be exercised without external data.

// Guards like `!(x > 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod align;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod heads;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod pe;
pub mod repr;
pub mod runner;
pub mod split;
pub mod synth;

pub use error::{Error, Result};
