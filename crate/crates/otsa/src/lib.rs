//! Optimal-transport cross-attention toolkit.
//!
//! The crate bundles four layers that build on each other:
//!
//! - [`autodiff`]: a small reverse-mode tape over dense `f64` arrays,
//! - [`ot`]: Sinkhorn transport with general marginals and warm starts, exact
//!   unregularized transport, entropy measures, and linear assignment,
//! - [`mesh`]: entropy minimization of the Sinkhorn plan by noise-seeded,
//!   norm-clipped gradient descent on the cost matrix,
//! - [`slot`] and [`bench`]: slot attention variants wired onto those kernels
//!   plus the random-objects detection benchmark used to compare them.
//!
//! The `otsa` binary (see [`cli`]) exposes the diagnostics: entropy/gradient
//! sweeps, the warm-start gap experiment, one-off transport solves, and
//! benchmark runs.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod gradcheck;
pub mod mesh;
pub mod ot;
pub mod slot;

pub use autodiff::{Array, Tape, Tensor};
