//! Flow decoding from fine fingertip force control performance.
//!
//! The crate is organised around the data flow of one experiment:
//!
//! - [`task`]: trial evaluation, the adaptive difficulty staircase and probe
//!   scheduling.
//! - [`metrics`]: the eight per-trial performance metrics and their probe
//!   window aggregates.
//! - [`simulator`]: a closed-loop force-control model whose loop period and
//!   modulation step depend on flow intensity, used to generate synthetic
//!   subjects.
//! - [`decoder`]: the cross-validated linear flow decoder with metric subset
//!   selection.
//! - [`stats`]: significance tests, FDR correction, subject QC and Welch PSD.
//! - [`dataio`]: on-disk session, trace and report formats.
//! - [`pipeline`]: the per-subject and cohort analysis shared by the CLI and
//!   the live service.

pub mod dataio;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod simulator;
pub mod stats;
pub mod task;

pub use error::{Error, Result};

/// Derives an independent RNG seed from a base seed and a stream label.
///
/// SplitMix64 finaliser; used so that every random stream (subject, trial,
/// replicate) is reproducible from the single user-facing seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
