pub mod baselines;
pub mod crl;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pointnet;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
