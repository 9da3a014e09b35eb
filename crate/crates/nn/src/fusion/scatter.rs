use geofuse_core::geom::PixelProjection;

use crate::error::{Error, Result};
use crate::layers::Grid;
use crate::tensor::Real;

/// Marks a pixel no point was written to.
pub const NO_SOURCE: u32 = u32::MAX;

/// Image-shaped map of projected point features.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeatureMap<T> {
    pub grid: Grid,
    pub channels: usize,
    /// `pixels x channels`, zero where unoccupied.
    pub values: Vec<T>,
    /// Winning point per pixel or [`NO_SOURCE`].
    pub source_index: Vec<u32>,
    /// Depth of the winning point, infinite where unoccupied.
    pub source_depth: Vec<f64>,
}

impl<T: Real> SparseFeatureMap<T> {
    pub fn empty(grid: Grid, channels: usize) -> Self {
        Self {
            grid,
            channels,
            values: vec![T::zero(); grid.pixels() * channels],
            source_index: vec![NO_SOURCE; grid.pixels()],
            source_depth: vec![f64::INFINITY; grid.pixels()],
        }
    }

    #[inline]
    pub fn occupied(&self, pixel: usize) -> bool {
        self.source_index[pixel] != NO_SOURCE
    }

    pub fn occupied_count(&self) -> usize {
        self.source_index.iter().filter(|&&s| s != NO_SOURCE).count()
    }

    pub fn occupied_pixels(&self) -> Vec<usize> {
        (0..self.grid.pixels()).filter(|&p| self.occupied(p)).collect()
    }

    pub fn pixel(&self, p: usize) -> &[T] {
        &self.values[p * self.channels..(p + 1) * self.channels]
    }
}

/// Writes each visible in-bounds point's feature row at its pixel. On
/// collisions the nearer point wins, then the lower index.
pub fn scatter_features<T: Real>(
    features: &[T],
    channels: usize,
    visible: &[bool],
    projections: &[PixelProjection],
    grid: Grid,
) -> Result<SparseFeatureMap<T>> {
    let n = visible.len();
    if projections.len() != n || features.len() != n * channels {
        return Err(Error::ShapeMismatch(format!(
            "scatter: {} feature values, {} mask entries, {} projections at {channels} channels",
            features.len(),
            n,
            projections.len()
        )));
    }
    let mut map = SparseFeatureMap::empty(grid, channels);
    for (i, (proj, &vis)) in projections.iter().zip(visible).enumerate() {
        if !vis || !proj.in_bounds {
            continue;
        }
        if proj.col as usize >= grid.width || proj.row as usize >= grid.height {
            return Err(Error::ShapeMismatch(format!("scatter: projection of point {i} outside the map")));
        }
        let p = proj.pixel_index(grid.width as u32);
        if proj.depth < map.source_depth[p] {
            map.source_depth[p] = proj.depth;
            map.source_index[p] = i as u32;
        }
    }
    for p in 0..grid.pixels() {
        let s = map.source_index[p];
        if s != NO_SOURCE {
            let src = s as usize * channels;
            map.values[p * channels..(p + 1) * channels].copy_from_slice(&features[src..src + channels]);
        }
    }
    Ok(map)
}

/// Gradient with respect to the `points x channels` feature rows: winners
/// receive their pixel's gradient, every other row zero.
pub fn scatter_backward<T: Real>(map: &SparseFeatureMap<T>, grad_values: &[T], points: usize) -> Vec<T> {
    let c = map.channels;
    let mut d = vec![T::zero(); points * c];
    for (p, &s) in map.source_index.iter().enumerate() {
        if s != NO_SOURCE {
            let dst = s as usize * c;
            d[dst..dst + c].copy_from_slice(&grad_values[p * c..(p + 1) * c]);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(col: i64, row: i64, depth: f64) -> PixelProjection {
        PixelProjection {
            u: col as f64 + 0.5,
            v: row as f64 + 0.5,
            col,
            row,
            depth,
            in_bounds: true,
        }
    }

    #[test]
    fn nearest_point_wins() {
        let grid = Grid { height: 2, width: 2 };
        let feats = [1.0f64, 2.0];
        let map = scatter_features(&feats, 1, &[true, true], &[at(1, 0, 2.0), at(1, 0, 1.0)], grid).unwrap();
        assert_eq!(map.source_index[1], 1);
        assert_eq!(map.values, vec![0.0, 2.0, 0.0, 0.0]);
        assert_eq!(map.occupied_count(), 1);
        let d = scatter_backward(&map, &[5.0, 6.0, 7.0, 8.0], 2);
        assert_eq!(d, vec![0.0, 6.0]);
    }

    #[test]
    fn equal_depth_goes_to_lower_index() {
        let grid = Grid { height: 1, width: 1 };
        let map = scatter_features(&[1.0f64, 2.0], 1, &[true, true], &[at(0, 0, 1.0), at(0, 0, 1.0)], grid).unwrap();
        assert_eq!(map.source_index[0], 0);
    }

    #[test]
    fn no_visible_points_leaves_map_empty() {
        let grid = Grid { height: 2, width: 2 };
        let map = scatter_features(&[1.0f32], 1, &[false], &[at(0, 0, 1.0)], grid).unwrap();
        assert_eq!(map.occupied_count(), 0);
    }
}
