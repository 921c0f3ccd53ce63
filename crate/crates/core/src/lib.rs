pub mod apps;
pub mod clock;
pub mod cluster;
pub mod config;
pub mod error;
pub mod flow;
pub mod harness;
pub mod http;
pub mod model;
pub mod operators;
pub mod oracle;
pub mod runtime;
pub mod sim;
pub mod source;
pub mod store;
pub mod workflow;

pub use error::{Error, Result};
