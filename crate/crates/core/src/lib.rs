pub mod edit;
pub mod error;
pub mod geometry;
pub mod image;
pub mod ingest;
pub mod metrics;
pub mod raster;
pub mod scene;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
