//! Context-adaptive sparse attention at desk scale.
//!
//! The pipeline has two phases. An offline calibration pass scores
//! candidate sparsity configurations per attention head and keeps the
//! sparsest one that retains a threshold share of attention mass
//! ([`calibrate`]). At inference time, prefill selects a compact global
//! token subset per head from block-level redundancy scores and fuses it
//! with the recent local window ([`selection`], [`engine`]); decoding
//! appends new tokens to a staging block that is compressed against the
//! head's budget each time it fills. An exact attention oracle
//! ([`attention`]) and a bound checker ([`bounds`]) quantify the
//! approximation error, [`workload`] generates synthetic inputs with
//! recognizable attention patterns, and [`metrics`] accounts FLOPs and KV
//! bytes.

pub mod attention;
pub mod bounds;
pub mod calibrate;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod selection;
pub mod sparsity;
pub mod tensor;
pub mod workload;

pub use error::{Result, TcaError};
