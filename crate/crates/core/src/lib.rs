pub mod agents;
pub mod deviations;
pub mod environments;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod history;
pub mod oracle;
pub mod transcript;

pub use error::{Error, Result};
