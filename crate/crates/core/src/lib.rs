//! Toolkit for classifying pulmonary embolism from non-contrast chest CT
//! volumes with a small 3D CNN.

pub mod config;
pub mod dicom;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod trainer;
pub mod volume;

pub use error::{Axis, Error, Result};
pub use volume::{Boundary, Unit, Volume};
