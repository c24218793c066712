//! Change detection for long-term IaaS performance signatures.
//!
//! A performance signature is a matrix of per-QoS-parameter relative
//! performance series, each row scaled to unit population standard
//! deviation. This crate generates signatures from trial experiences,
//! models the three families of performance noise (spike, attenuation,
//! distortion), and decides whether a recomputed signature reflects a real
//! behavioural change or only noise.
//!
//! Module map:
//!
//! - [`model`]: grid, series, signature and trial types plus signature CSV I/O
//! - [`signature`]: normalized-averaging signature generation and PAA
//! - [`similarity`]: normalization, PCC, Euclidean, cosine and RMSE
//! - [`cpd`]: anomaly thresholds and event detection over anomaly streams
//! - [`noisegen`]: noise specifications, seeded injection, SNR
//! - [`detect`]: sliding-window, SNR and CUSUM detectors behind a registry
//! - [`datagen`]: synthetic workload, QoS profiles and labeled corpora
//! - [`eval`]: confusion counts, metrics and the experiment runner
//! - [`cli`]: configuration and the `sigdrift` command line

// Negated float comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cpd;
pub mod datagen;
pub mod detect;
pub mod error;
pub mod eval;
pub mod model;
pub mod noisegen;
pub mod seed;
pub mod signature;
pub mod similarity;
pub(crate) mod stats;

pub use error::{Error, Result};
pub use model::{QosSeries, Signature, TimeGrid, TrialExperience};
