//! Synthetic rooms, the on-disk dataset layout, feature-map PCA and the
//! plumbing behind the `geofuse` CLI.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pca;
pub mod scene;

pub use error::{Result, WorkbenchError};
pub use scene::{gen_scene, gen_scenes, SceneSpec};
