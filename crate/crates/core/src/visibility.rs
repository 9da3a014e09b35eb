//! Solid-angle occlusion test for point sets.
//!
//! A frustum point `p` is hidden when some other frustum point `q` occludes
//! it, where `q` occludes `p` iff either
//!
//! * `q` lands in the same integer pixel and is strictly nearer, or equally
//!   near with a lower index (the per-pixel z-buffer), or
//! * `theta > 0`, `q` is strictly nearer, and the unit rays satisfy
//!   `dot(dir_p, dir_q) >= cos(theta)`.
//!
//! At `theta = 0` only the z-buffer clause is active. Keeping the z-buffer
//! clause at every angle makes visibility monotone: raising `theta` can only
//! hide more points.
//!
//! Candidate occluders come from a screen-space grid. The search box around
//! `p` is derived from the cone geometry: two unit rays at most `theta`
//! apart, with `p`'s ray at angle `a` off the optical axis, project at most
//! `f * 2 sin(theta / 2) / (cos(a) cos(a + theta))` pixels apart along
//! each image axis.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{project, CameraRig, PointCloud};

pub const DEFAULT_THETA_DEG: f64 = 2.0;
pub const DEFAULT_CELL_SIZE: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibilityConfig {
    /// Occlusion cone half-angle in degrees.
    pub theta_deg: f64,
    /// Screen grid cell size in pixels. Performance only.
    pub cell_size: f64,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        Self {
            theta_deg: DEFAULT_THETA_DEG,
            cell_size: DEFAULT_CELL_SIZE,
        }
    }
}

impl VisibilityConfig {
    pub fn with_theta(theta_deg: f64) -> Self {
        Self {
            theta_deg,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_deg >= 0.0 && self.theta_deg < 90.0) {
            return Err(Error::InvalidConfig(format!(
                "theta must lie in [0, 90) degrees, got {}",
                self.theta_deg
            )));
        }
        if !(self.cell_size >= 1.0 && self.cell_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cell_size must be at least 1 pixel, got {}",
                self.cell_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityResult {
    pub visible: Vec<bool>,
    /// Fraction of image pixels hit by at least one visible point.
    pub coverage: f64,
}

impl VisibilityResult {
    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        self.visible
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| i)
            .collect()
    }
}

struct Projected {
    pixel: usize,
    col: i64,
    row: i64,
    u: f64,
    v: f64,
    depth: f64,
    dir: Vector3<f64>,
}

fn project_all(cloud_cam: &PointCloud, rig: &CameraRig) -> Result<Vec<Projected>> {
    cloud_cam
        .positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let proj = project(rig, p);
            if !proj.in_bounds {
                return Err(Error::InvalidCloud(format!(
                    "point {i} is outside the camera frustum"
                )));
            }
            Ok(Projected {
                pixel: proj.pixel_index(rig.width),
                col: proj.col,
                row: proj.row,
                u: proj.u,
                v: proj.v,
                depth: proj.depth,
                dir: p.normalize(),
            })
        })
        .collect()
}

/// Compact cell -> point-index lists.
struct ScreenGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl ScreenGrid {
    fn build(points: &[Projected], rig: &CameraRig, cell: f64) -> Self {
        let cols = (rig.width as f64 / cell).ceil() as usize;
        let rows = (rig.height as f64 / cell).ceil() as usize;
        let cell_of = |p: &Projected| {
            let cx = ((p.col as f64 / cell).floor() as usize).min(cols - 1);
            let cy = ((p.row as f64 / cell).floor() as usize).min(rows - 1);
            cy * cols + cx
        };
        let mut counts = vec![0usize; cols * rows + 1];
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut items = vec![0usize; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            items[fill[c]] = i;
            fill[c] += 1;
        }
        Self {
            cell,
            cols,
            rows,
            starts,
            items,
        }
    }

    fn cell_range(&self, lo: f64, hi: f64, n: usize) -> (usize, usize) {
        let a = (lo / self.cell).floor().max(0.0);
        let b = (hi / self.cell).floor().min((n - 1) as f64);
        (a as usize, b.max(a) as usize)
    }

    /// Calls `f` on every point in cells overlapping the pixel box.
    fn any_in_box(&self, u0: f64, u1: f64, v0: f64, v1: f64, mut f: impl FnMut(usize) -> bool) -> bool {
        let (cx0, cx1) = self.cell_range(u0, u1, self.cols);
        let (cy0, cy1) = self.cell_range(v0, v1, self.rows);
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                let c = cy * self.cols + cx;
                if self.items[self.starts[c]..self.starts[c + 1]].iter().any(|&q| f(q)) {
                    return true;
                }
            }
        }
        false
    }
}

#[inline]
fn occludes(q: &Projected, qi: usize, p: &Projected, pi: usize, cos_theta: Option<f64>) -> bool {
    if qi == pi {
        return false;
    }
    if q.pixel == p.pixel && (q.depth < p.depth || (q.depth == p.depth && qi < pi)) {
        return true;
    }
    match cos_theta {
        Some(c) => q.depth < p.depth && p.dir.dot(&q.dir) >= c,
        None => false,
    }
}

/// Visibility of each frustum point of a camera-frame cloud.
pub fn visible_mask(cloud_cam: &PointCloud, rig: &CameraRig, cfg: &VisibilityConfig) -> Result<VisibilityResult> {
    cfg.validate()?;
    let points = project_all(cloud_cam, rig)?;
    if points.is_empty() {
        return Ok(VisibilityResult {
            visible: Vec::new(),
            coverage: 0.0,
        });
    }
    let grid = ScreenGrid::build(&points, rig, cfg.cell_size);
    let theta = cfg.theta_deg.to_radians();
    let cos_theta = (cfg.theta_deg > 0.0).then(|| theta.cos());
    let chord = 2.0 * (theta / 2.0).sin();
    let whole = (0.0, rig.width as f64, 0.0, rig.height as f64);

    let visible: Vec<bool> = points
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let (u0, u1, v0, v1) = if cos_theta.is_none() {
                let (c, r) = (p.col as f64, p.row as f64);
                (c, c, r, r)
            } else {
                let off_axis = p.dir.z.clamp(-1.0, 1.0).acos();
                let outer = off_axis + theta;
                if outer >= std::f64::consts::FRAC_PI_2 - 1e-6 {
                    whole
                } else {
                    let scale = chord / (off_axis.cos() * outer.cos());
                    let rx = rig.fx * scale + 1.0;
                    let ry = rig.fy * scale + 1.0;
                    (p.u - rx, p.u + rx, p.v - ry, p.v + ry)
                }
            };
            !grid.any_in_box(u0, u1, v0, v1, |qi| occludes(&points[qi], qi, p, pi, cos_theta))
        })
        .collect();

    let coverage = pixel_coverage(&points, &visible, rig);
    Ok(VisibilityResult { visible, coverage })
}

fn pixel_coverage(points: &[Projected], visible: &[bool], rig: &CameraRig) -> f64 {
    let mut hit = vec![false; rig.pixel_count()];
    let mut distinct = 0usize;
    for (p, &v) in points.iter().zip(visible) {
        if v && !hit[p.pixel] {
            hit[p.pixel] = true;
            distinct += 1;
        }
    }
    distinct as f64 / rig.pixel_count() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoverageRow {
    pub theta_deg: f64,
    pub visible_points: usize,
    pub coverage: f64,
}

/// Coverage for each threshold of an ascending list.
pub fn coverage_sweep(
    cloud_cam: &PointCloud,
    rig: &CameraRig,
    thetas_deg: &[f64],
    cell_size: f64,
) -> Result<Vec<CoverageRow>> {
    if thetas_deg.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidConfig("thetas must be sorted ascending".into()));
    }
    thetas_deg
        .iter()
        .map(|&theta_deg| {
            let res = visible_mask(cloud_cam, rig, &VisibilityConfig { theta_deg, cell_size })?;
            Ok(CoverageRow {
                theta_deg,
                visible_points: res.visible_count(),
                coverage: res.coverage,
            })
        })
        .collect()
}
