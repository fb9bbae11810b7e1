//! Dual-stream patch masking for rotation-invariant point-cloud masked autoencoders.
//!
//! The pipeline takes a point cloud, splits it into `K` patches (farthest point
//! sampling + k-NN), and produces a boolean mask over those patches from two
//! score streams:
//!
//! * a **spatial grid** stream ([`grid_mask`]) that ranks patch centers per axis,
//!   folds the ranks into a binary 3D grid and looks up a probability per grid
//!   cell, and
//! * a **semantic** stream ([`semantic_mask`]) that clusters patches by their
//!   attention rows with a diagonal Gaussian mixture and gives every patch of a
//!   component the same random score.
//!
//! [`curriculum`] blends the two with a weight `alpha(t) = (t/T)^gamma` and
//! picks the top-scoring patches at the target ratio. [`attention_io`] handles
//! the ATN1 attention format and selection exports, and [`harness`] holds the
//! curriculum trace and rotation-consistency studies used by the CLI.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention_io;
pub mod curriculum;
pub mod error;
pub mod geometry;
pub mod grid_mask;
pub mod harness;
pub mod matrix;
pub mod metrics;
pub mod semantic_mask;

mod rng;

pub use error::{Error, Result};
