//! Transformer captioner with frequency-aware embedding diffusion and a
//! divergent semantic supervisor, plus the synthetic corpora, metrics and
//! experiment harness used to exercise it at desk scale.

pub mod corpus;
pub mod decoder;
pub mod dss;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fad;
pub mod features;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Result, RsfdError};
