//! Self-optimal transport attention.
//!
//! Tokens are mapped into a finite kernel feature space with a Nyström
//! embedding, aligned with a learned reference set by entropic optimal
//! transport, and aggregated through the resulting plan. The crate holds the
//! numerical core (`numerics`, `kernels`, `sinkhorn`, `nystrom`), the
//! attention operator, a small hierarchical model with its training loop, and
//! synthetic data generators.

pub mod attention;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod numerics;
pub mod nystrom;
pub mod sinkhorn;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
