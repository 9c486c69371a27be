pub mod autograd;
pub mod corpus;
pub mod data;
pub mod error;
pub mod metrics;
pub mod mixup;
pub mod model;
pub mod negatives;
pub mod pipeline;
pub mod registry;
pub mod spans;
pub mod synth;
pub mod text;
pub mod training;

pub use error::{Error, Result};
