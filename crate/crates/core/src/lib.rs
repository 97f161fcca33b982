//! Task-specific inconsistency alignment for domain-adaptive prediction, at
//! desk scale: a small autodiff engine, a synthetic covariate-shift
//! generator, the detection-surrogate network with auxiliary predictor
//! banks, the alignment losses, a trainer and an ablation harness.

pub mod ablation;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod synth;
pub mod toy2d;
pub mod trainer;

pub use error::{Error, Result};
