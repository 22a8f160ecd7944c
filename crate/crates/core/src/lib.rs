//! Tree-of-evidence: two-stream evidence-bottleneck predictors over
//! hourly vitals and clinical-note chunks, plus beam search for small,
//! decision-preserving evidence sets.

pub mod baselines;
pub mod datamodel;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod report;
pub mod search;
pub mod streams;
pub mod synth;
pub mod training;

pub use error::{Result, ToeError};
