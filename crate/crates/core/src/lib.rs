//! Motion encoding for dynamic point cloud sequences by fitting space-time
//! surfaces: closed-form and iteratively reweighted tangent-plane fits in the
//! physical 4D domain, a differentiable feature-space kinematic unit, a small
//! two-stream classifier, synthetic motion data with analytic flow, and the
//! file formats and CLI around them.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod io;
pub mod kinet_unit;
pub mod network;
pub mod stsolver;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
