pub mod baseline;
pub mod config;
pub mod data_pipeline;
pub mod error;
pub mod evaluation;
pub mod kinn;
pub mod numeric;
pub mod pipeline;
pub mod reaction_model;
pub mod reactor_sim;
pub mod stiff;

pub use error::{Error, Result};
