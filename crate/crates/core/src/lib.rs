//! Two-stage human pose estimation: heatmap localization followed by an
//! image-guided graph network that corrects occluded joints.

pub mod adaptation;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod correction;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod pose;
pub mod skeleton;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
