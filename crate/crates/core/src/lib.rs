//! Reference-based video super-resolution with dual-stream bidirectional
//! recurrent propagation.
//!
//! A low-resolution (LR) video is super-resolved with the help of a
//! reference (Ref) video that shows the central part of the same scene at a
//! higher magnification. Two recurrent streams run in each temporal
//! direction: the Ref stream aggregates reference features aligned by patch
//! matching, and the SR stream aggregates the features used for
//! reconstruction.

pub mod alignment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod ref_stream;
pub mod resample;
pub mod sr_stream;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
