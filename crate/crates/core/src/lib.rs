//! Spectral meta-classification and Shapley attribution for multi-branch
//! classifiers.

pub mod attribution;
pub mod dataio;
pub mod evaluation;
pub mod gbdt;
pub mod pipeline;
pub mod spectral;
pub mod synth;
pub mod treeshap;
