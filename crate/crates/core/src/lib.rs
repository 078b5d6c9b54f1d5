//! Association of buoys detected in maritime camera frames with chart markers.

pub mod assoc;
pub mod baselines;
pub mod camera;
pub mod chartdb;
pub mod datasetio;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod geo;
pub mod track;

pub use error::{Error, Result};
