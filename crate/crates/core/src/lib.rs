pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod occlusion;
pub mod synth;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use features::{Dataset, PartFeatureSet, Split};
pub mod encoder;
pub mod training;
pub mod neighborhood;
pub mod orgnn;
