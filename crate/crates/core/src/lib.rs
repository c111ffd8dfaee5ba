pub mod backbone;
pub mod checkpoint;
pub mod dataio;
pub mod degradation;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod persist;
pub mod relative;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
