//! Inference-aware neural optimisation of summary statistics on a
//! three-dimensional signal/background mixture.

pub mod autodiff;
pub mod digest;
pub mod exec;
pub mod inference;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod statmodel;
pub mod synthgen;
pub mod train;
