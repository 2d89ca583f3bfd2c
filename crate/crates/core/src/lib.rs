//! Experiments on how a bias toward small-norm solutions shapes
//! error-vs-capacity curves.

pub mod data;
pub mod features;
pub mod mlp;
pub mod oracle;
pub mod rng;
pub mod solver;
pub mod sweep;
