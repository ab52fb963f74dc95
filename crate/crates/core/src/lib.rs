//! Multiuser detection for pre-equalized random-access bandwidth requests.
//!
//! The crate covers the whole link-level pipeline: the shared BPSK code bank,
//! the channel-mismatch model and its `λ` statistics, decoder design for the
//! correlation detector, the correlation detector itself, the sparse-recovery
//! detectors (ℓp-constrained TLS and Lasso), and a seeded Monte Carlo harness.

pub mod channel;
pub mod cmud;
pub mod codebook;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod lambda_stats;
pub mod seed;
mod serde_util;
pub mod sparse_tls;

pub use error::{MudError, Result};
