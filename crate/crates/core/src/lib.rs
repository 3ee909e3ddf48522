#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Temporally parameterized neural displacement fields for longitudinal
//! registration of 3D volumes.
//!
//! A per-subject coordinate network maps `(x, y, z, t)` to a displacement.
//! Its spatial Jacobian, temporal derivative, Jacobian determinant and the
//! time derivative of that determinant are computed analytically and feed
//! the spatial, temporal and monotonic regularizers of the fitting loss.

pub mod diffengine;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
