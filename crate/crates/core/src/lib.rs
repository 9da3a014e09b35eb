//! Geometry side of the fusion pipeline: pinhole cameras, frustum selection,
//! point visibility, point-cloud sampling and the on-disk formats.

pub mod error;
pub mod geom;
pub mod io;
pub mod rng;
pub mod sample;
pub mod sampling;
pub mod visibility;

pub use error::{Error, Result};
pub use geom::{CameraRig, DepthMap, PixelProjection, PointCloud};
pub use sample::{SceneSample, IGNORE_LABEL};
pub use visibility::{VisibilityConfig, VisibilityResult};
