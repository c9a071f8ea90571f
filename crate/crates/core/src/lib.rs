pub mod autodiff;
pub mod baselines;
pub mod ehr;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod interpret;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
