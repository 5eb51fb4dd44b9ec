pub mod archs;
pub mod checkpoint;
pub mod artifact;
pub mod conditioning;
pub mod coupler;
pub mod error;
pub mod expcli;
pub mod layers;
pub mod metrics;
pub mod ranklab;
pub mod tensor;
pub mod trainer;
pub mod toyclimate;

pub use error::{Error, Result};
