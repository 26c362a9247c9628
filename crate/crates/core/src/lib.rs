//! Federated multi-task spectral clustering.
//!
//! Each client learns a linear embedding `F ≈ XW` of its own data under a
//! graph-Laplacian smoothness term, and a server couples the stacked
//! projections through a low-rank tensor penalty. The optimizer is ADMM;
//! only the `W` matrices ever leave a client.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod client;
pub mod clustering;
pub mod error;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod orchestrator;
pub mod server;
pub mod tensor;

pub use error::{FmtcError, Result};
