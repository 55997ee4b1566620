pub mod checkpoint;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod nn;
pub mod planner;
pub mod retrieval;
pub mod step;
pub mod trajectory;

pub use error::{RadError, Result};
