pub mod degrade;
pub mod error;
pub mod extractor;
pub mod graph;
pub mod harness;
pub mod imaging;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod priors;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
