use crate::error::{Error, Result};
use crate::geom::{CameraRig, PointCloud};

/// Class id excluded from loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// One training unit: a registered RGB view, its per-pixel labels and the
/// scene point cloud (world frame).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// Row-major `height x width x 3`, values in `[0, 1]`.
    pub rgb: Vec<f32>,
    /// Row-major `height x width` class ids, `IGNORE_LABEL` for no label.
    pub labels: Vec<u8>,
    pub cloud: PointCloud,
    pub rig: CameraRig,
    pub scene_id: u32,
    pub view_id: u32,
}

impl SceneSample {
    pub fn width(&self) -> usize {
        self.rig.width as usize
    }

    pub fn height(&self) -> usize {
        self.rig.height as usize
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.rig.validate()?;
        self.cloud.validate()?;
        let pixels = self.rig.pixel_count();
        if self.rgb.len() != pixels * 3 || self.labels.len() != pixels {
            return Err(Error::DimensionMismatch {
                expected: format!("{pixels} pixels"),
                actual: format!("{} rgb values, {} labels", self.rgb.len(), self.labels.len()),
            });
        }
        if self.cloud.is_empty() {
            return Err(Error::InvalidCloud("scene cloud is empty".into()));
        }
        if let Some(l) = self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            return Err(Error::InvalidConfig(format!(
                "label {l} outside {num_classes} classes"
            )));
        }
        Ok(())
    }
}
