//! Multiclass processor-sharing cells with impatient users.
//!
//! A cell serves `K` classes of data flows (radio conditions), class `k` with
//! throughput `c_k` and share `p_k` of the Poisson arrival stream. Active
//! flows share capacity egalitarianly and every user abandons after an
//! exponential patience timer of rate `mu_0`.
//!
//! The crate offers:
//!
//! - [`model`]: validated cell parameters.
//! - [`statespace`]: level-ordered enumeration and ranking of occupancy vectors.
//! - [`ctmc`]: the truncated generator and its stationary distribution.
//! - [`reneging`]: per-state reneging probabilities with certified truncation
//!   brackets, per-class reneging probabilities and exact QoE perturbation.
//! - [`fluid`]: the overload fixed point and the fluid QoE perturbation metric.
//! - [`sim`]: a seeded simulator of the same process, used as an oracle.
//! - [`pricing`]: flat + elastic tariffs, congestion rights and price tables.
//! - [`cli`]: configuration file handling and the command runners.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod ctmc;
pub mod error;
pub mod fluid;
pub mod format;
pub mod model;
pub mod pricing;
pub mod reneging;
pub mod sim;
pub mod statespace;

pub use error::{Error, Result};
pub use model::{CellModel, ClassProfile};
pub use statespace::{StateVector, TruncatedSpace};
