//! Decentralized adaptive voltage control for radial distribution feeders
//! with time-varying net load.
//!
//! The crate is organized bottom-up:
//!
//! - [`grid`]: feeder topology and the LinDistFlow sensitivity matrices `R`, `X`.
//! - [`scenario`]: net-load scenarios driven by per-bus basis functions and
//!   their decomposition into local and non-local disturbance terms.
//! - [`control`]: the linear incremental controller and the adaptive law.
//! - [`certify`]: transition matrices, stability conditions, equilibria and
//!   input-to-state stability envelopes.
//! - [`engine`]: closed-loop rollouts and cost evaluation.
//! - [`train`]: gradient-based tuning of controller parameters through
//!   unrolled trajectories, with projection onto the certified set.

// Range checks are written as `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod control;
pub mod engine;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod scenario;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
