//! Semi-supervised grasp detection in a vector-quantized latent space.
//!
//! The crate is organized around a small differentiable-computation core and
//! the task-specific machinery built on top of it:
//!
//! - [`autodiff`]: tensors, a tape-based reverse-mode gradient engine, and a
//!   finite-difference verification harness. Every operator's analytic
//!   gradient is checked against central differences in the test suite.
//! - [`grasp`]: oriented grasp rectangles, per-pixel grasp maps, conversions
//!   between the two, and the Jaccard success metric.
//! - [`data`]: Cornell-format ingestion, augmentation, labelled/unlabelled/test
//!   splitting, and a synthetic bar-scene generator for desk-scale runs.
//! - [`vq`]: the discrete bottleneck — codebook, nearest-neighbour assignment,
//!   straight-through gradient routing, and codebook diagnostics.
//! - [`nets`]: encoder / decoder / grasp-head / baseline network builders and
//!   the checkpoint format.
//! - [`pipeline`]: two-phase training, evaluation, prediction, and the
//!   labelled-ratio sweep driver behind the CLI.

pub mod autodiff;
pub mod data;
pub mod grasp;
pub mod nets;
pub mod pipeline;
pub mod vq;

pub use autodiff::{AutodiffError, NodeId, Tape};
pub use grasp::{GraspMaps, GraspRectangle};
pub use vq::Codebook;
