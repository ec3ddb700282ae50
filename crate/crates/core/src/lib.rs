//! Synthesize-partition-adapt: score a training corpus against test queries
//! with data attribution, split it into disjoint subsets, train one low-rank
//! adaptation per subset and measure how diverse the ensemble's outputs are.

pub mod adapt;
pub mod attribution;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod pipeline;
pub mod sample;
pub mod seed;

pub use error::{Error, Result};
