pub mod corpus;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod length;
pub mod levt;
pub mod metrics;
pub mod nn;
pub mod pe;
pub mod teacher;

pub use error::{Error, Result};
