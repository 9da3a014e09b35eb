//! Projection of point features into the image, pixel-wise fusion with
//! color, the segmentation head, loss and metrics.

pub mod loss;
pub mod merge;
pub mod metrics;
pub mod scatter;
pub mod seghead;

pub use loss::{cross_entropy, CrossEntropy};
pub use merge::{MergeCache, MergeGrads, MergeMode, PixelMerge, MERGED_CHANNELS};
pub use metrics::{argmax_labels, miou, ConfusionMatrix, Metrics};
pub use scatter::{scatter_backward, scatter_features, SparseFeatureMap, NO_SOURCE};
pub use seghead::{SegCache, SegHead, TrunkCache, TRUNK_CHANNELS};
