//! Pinhole camera model, rigid transforms, frustum selection and depth
//! back-projection.
//!
//! Pixel convention: the continuous coordinate `u` runs over `[0, width)` and
//! pixel `(col, row) = (0, 0)` covers `[0, 1) x [0, 1)`. Back-projection goes
//! through pixel centers (`col + 0.5`, `row + 0.5`). Camera frame is x right,
//! y down, z forward.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

pub const DEFAULT_NEAR_CLIP: f64 = 0.05;
const RIGID_TOLERANCE: f64 = 1e-9;

/// Raw 3D scene input: positions in meters and optional colors in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[f32; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vector3<f64>>) -> Self {
        Self {
            positions,
            colors: None,
        }
    }

    pub fn with_colors(positions: Vec<Vector3<f64>>, colors: Vec<[f32; 3]>) -> Result<Self> {
        let cloud = Self {
            positions,
            colors: Some(colors),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .positions
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(colors) = &self.colors {
            if colors.len() != self.positions.len() {
                return Err(Error::InvalidCloud(format!(
                    "{} colors for {} points",
                    colors.len(),
                    self.positions.len()
                )));
            }
            if let Some(i) = colors
                .iter()
                .position(|c| !c.iter().all(|v| (0.0..=1.0).contains(v)))
            {
                return Err(Error::InvalidCloud(format!("color {i} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Sub-cloud made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.positions.is_empty() {
            return Vector3::zeros();
        }
        let sum: Vector3<f64> = self.positions.iter().sum();
        sum / self.positions.len() as f64
    }
}

/// Pinhole intrinsics plus a rigid world-to-camera transform.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub world_to_camera: Matrix4<f64>,
    pub near_clip: f64,
    /// Optional far plane; indoor scenes leave it unset.
    pub far_clip: Option<f64>,
}

impl CameraRig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        world_to_camera: Matrix4<f64>,
        near_clip: f64,
    ) -> Result<Self> {
        let rig = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
            near_clip,
            far_clip: None,
        };
        rig.validate()?;
        Ok(rig)
    }

    /// Camera at `eye` looking at `target`, with image "up" aligned to
    /// `world_up` as far as possible. Square pixels, principal point at the
    /// image center, horizontal field of view `hfov` (radians).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        world_up: Vector3<f64>,
        width: u32,
        height: u32,
        hfov: f64,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidRig("eye and target coincide".into()))?;
        let right = forward
            .cross(&world_up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidRig("viewing direction parallel to up".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        let f = width as f64 / (2.0 * (hfov / 2.0).tan());
        Self::new(
            f,
            f,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            w2c,
            DEFAULT_NEAR_CLIP,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidRig(msg));
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return bad(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return bad("principal point must be finite".into());
        }
        if self.width == 0 || self.height == 0 {
            return bad(format!("image size {}x{} is empty", self.width, self.height));
        }
        if !(self.near_clip > 0.0 && self.near_clip.is_finite()) {
            return bad(format!("near_clip must be positive, got {}", self.near_clip));
        }
        if let Some(far) = self.far_clip {
            if !(far > self.near_clip) {
                return bad(format!("far_clip {far} must exceed near_clip {}", self.near_clip));
            }
        }
        let m = &self.world_to_camera;
        if !m.iter().all(|v| v.is_finite()) {
            return bad("world_to_camera has non-finite entries".into());
        }
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return bad("bottom row of world_to_camera must be (0, 0, 0, 1)".into());
        }
        let r = self.rotation();
        let gram_err = (r.transpose() * r - Matrix3::identity()).amax();
        if gram_err > RIGID_TOLERANCE {
            return bad(format!("rotation block is not orthonormal (error {gram_err:e})"));
        }
        if (r.determinant() - 1.0).abs() > RIGID_TOLERANCE {
            return bad("rotation block must have determinant +1".into());
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn camera_to_world(&self) -> Matrix4<f64> {
        let rt = self.rotation().transpose();
        let mut inv = Matrix4::identity();
        inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&-(rt * self.translation()));
        inv
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    pub fn point_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let m = &self.world_to_camera;
        Vector3::new(
            m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)],
            m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)],
            m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)],
        )
    }

    /// Ray direction (camera frame, not normalized, z = 1) through the
    /// continuous image point `(u, v)`.
    #[inline]
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Where a camera-frame point lands on the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub col: i64,
    pub row: i64,
    pub depth: f64,
    pub in_bounds: bool,
}

impl PixelProjection {
    /// Linear pixel index `row * width + col`; only meaningful when in bounds.
    #[inline]
    pub fn pixel_index(&self, width: u32) -> usize {
        self.row as usize * width as usize + self.col as usize
    }
}

/// Applies `world_to_camera` to every position; colors pass through.
pub fn to_camera_frame(cloud: &PointCloud, rig: &CameraRig) -> PointCloud {
    PointCloud {
        positions: cloud.positions.iter().map(|p| rig.point_to_camera(p)).collect(),
        colors: cloud.colors.clone(),
    }
}

#[inline]
pub fn project(rig: &CameraRig, point_cam: &Vector3<f64>) -> PixelProjection {
    let z = point_cam.z;
    if !(z > 0.0) {
        return PixelProjection {
            u: f64::NAN,
            v: f64::NAN,
            col: -1,
            row: -1,
            depth: z,
            in_bounds: false,
        };
    }
    let u = rig.fx * point_cam.x / z + rig.cx;
    let v = rig.fy * point_cam.y / z + rig.cy;
    let col = u.floor();
    let row = v.floor();
    let in_image = col >= 0.0 && row >= 0.0 && col < rig.width as f64 && row < rig.height as f64;
    let in_depth = z >= rig.near_clip && rig.far_clip.map_or(true, |far| z <= far);
    PixelProjection {
        u,
        v,
        col: if col.is_finite() { col as i64 } else { -1 },
        row: if row.is_finite() { row as i64 } else { -1 },
        depth: z,
        in_bounds: in_image && in_depth,
    }
}

/// Ascending indices of the camera-frame points that project in bounds.
pub fn frustum_select(cloud_cam: &PointCloud, rig: &CameraRig) -> Vec<usize> {
    cloud_cam
        .positions
        .iter()
        .enumerate()
        .filter(|(_, p)| project(rig, p).in_bounds)
        .map(|(i, _)| i)
        .collect()
}

/// Row-major depth image in meters; zero marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected: format!("{expected} depth values"),
                actual: format!("{}", data.len()),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> f64 {
        self.data[row as usize * self.width as usize + col as usize]
    }
}

/// Camera-frame points from every `stride`-th pixel (rows and columns) with a
/// positive finite depth, emitted through pixel centers.
pub fn backproject_depth(rig: &CameraRig, depth: &DepthMap, stride: usize) -> Result<PointCloud> {
    if depth.width != rig.width || depth.height != rig.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", rig.width, rig.height),
            actual: format!("{}x{}", depth.width, depth.height),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be positive".into()));
    }
    let mut positions = Vec::new();
    for row in (0..depth.height).step_by(stride) {
        for col in (0..depth.width).step_by(stride) {
            let d = depth.get(row, col);
            if !(d > 0.0 && d.is_finite()) {
                continue;
            }
            positions.push(Vector3::new(
                (col as f64 + 0.5 - rig.cx) * d / rig.fx,
                (row as f64 + 0.5 - rig.cy) * d / rig.fy,
                d,
            ));
        }
    }
    Ok(PointCloud::new(positions))
}
