pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod data;
pub mod decoder;
pub mod error;
pub mod icl;
pub mod model;
pub mod numeric;
pub mod params;
pub mod pipeline;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
