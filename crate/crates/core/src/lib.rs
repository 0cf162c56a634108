pub mod corpus;
pub mod editalign;
pub mod error;
pub mod imitation;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod nn;

pub use error::{ApeError, Result};
