//! Point encoder, 2D/3D fusion network, training loop and gradient checks.
//!
//! Every differentiable piece carries a hand-written reverse pass; the only
//! borrowed numerics are the GEMM kernels.

pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod lpointnet;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use layers::{Grid, Mode};
pub use lpointnet::{EvalStats, LPointNet, NetConfig, FEATURE_CHANNELS};
pub use model::{MergeStage, Model, ModelConfig, ModelInput};
pub use params::{ParamKind, ParamStore};
