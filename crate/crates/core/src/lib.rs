//! Hierarchical embeddings of structured EHR visits.

pub mod baselines;
pub mod ehr;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod mime;
pub mod model;
pub mod numerics;
pub mod seq;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
