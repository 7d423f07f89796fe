pub mod cli;
pub mod codec;
pub mod convert;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heatmap;
pub mod inference;
pub mod io;
pub mod layout;
pub mod nn;
pub mod plan;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod splits;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Geometry, Interpolation, LandmarkSet, Volume3D};
