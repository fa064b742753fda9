//! Knowledge distillation for tabular binary classification: data handling,
//! weighted learners, self-distillation generations, weighted ensembles and
//! an end-to-end pipeline.

pub mod distill;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod kdcore;
pub mod learners;
pub mod metrics;
pub mod pipeline;
pub mod synthetic;
pub mod tabular;

pub use error::{Error, ErrorCategory, Result};
