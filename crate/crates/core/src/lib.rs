//! Region-based object detection, from proposals to error analysis.
//!
//! The crate is organized in pipeline order: [`geometry`] and [`imaging`]
//! are the primitives, [`proposals`] and [`features`] turn an image into
//! scored-ready vectors, [`training`] fits the per-class SVMs and box
//! regressors, [`detection`] runs them at test time, [`evaluation`] scores
//! the output, and [`pipeline`] strings the stages together over a run
//! directory. [`synthdata`] provides the synthetic scenes everything is
//! exercised on.

pub mod detection;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod imaging;
pub mod pipeline;
pub mod proposals;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
