pub mod annotation;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evalbench;
pub mod evidence;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod reasoner;
pub mod rewards;
pub mod training;
pub mod transcript;

pub use error::{Error, Result};
