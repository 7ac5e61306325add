pub mod autograd;
mod binio;
pub mod codebook;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod neural;
pub mod predictor;
pub mod trainer;

pub use error::{MorpheusError, Result};
pub use model::MorpheusModel;
