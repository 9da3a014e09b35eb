//! Point-cloud decimation and context gathering for large fields of view.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::rng::Rng64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub poisson_radius: f64,
    pub context_radius: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            poisson_radius: 0.2,
            context_radius: 1.0,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        check_radius(self.poisson_radius)?;
        check_radius(self.context_radius)
    }
}

fn check_radius(radius: f64) -> Result<()> {
    if radius > 0.0 && radius.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("radius must be positive, got {radius}")))
    }
}

type Cell = (i64, i64, i64);

/// Uniform 3D hash grid with cubic cells of side `cell`.
struct HashGrid {
    cell: f64,
    cells: HashMap<Cell, Vec<usize>>,
}

impl HashGrid {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: &Vector3<f64>) -> Cell {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        )
    }

    fn insert(&mut self, p: &Vector3<f64>, index: usize) {
        self.cells.entry(self.key(p)).or_default().push(index);
    }

    /// Indices stored in the 27 cells around `p`'s cell.
    fn neighbours<'a>(&'a self, p: &Vector3<f64>) -> impl Iterator<Item = usize> + 'a {
        let (x, y, z) = self.key(p);
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| {
                (-1..=1).flat_map(move |dz| {
                    self.cells
                        .get(&(x + dx, y + dy, z + dz))
                        .into_iter()
                        .flat_map(|v| v.iter().copied())
                })
            })
        })
    }
}

/// Greedy dart throwing over a seeded shuffle of the points: a point is kept
/// iff no previously kept point lies strictly closer than `radius`. Returns
/// the kept indices in ascending order.
pub fn poisson_downsample(cloud: &PointCloud, radius: f64, seed: u64) -> Result<Vec<usize>> {
    check_radius(radius)?;
    let order = Rng64::new(seed).permutation(cloud.len());
    let r2 = radius * radius;
    let mut grid = HashGrid::new(radius);
    let mut kept = Vec::new();
    for i in order {
        let p = &cloud.positions[i];
        let blocked = grid
            .neighbours(p)
            .any(|k| (cloud.positions[k] - p).norm_squared() < r2);
        if !blocked {
            grid.insert(p, i);
            kept.push(i);
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Sorted union of the anchors and every point within `radius` (inclusive)
/// of some anchor.
pub fn radius_context(cloud: &PointCloud, anchors: &[usize], radius: f64) -> Result<Vec<usize>> {
    check_radius(radius)?;
    if let Some(&bad) = anchors.iter().find(|&&a| a >= cloud.len()) {
        return Err(Error::InvalidConfig(format!(
            "anchor index {bad} out of range for {} points",
            cloud.len()
        )));
    }
    let mut grid = HashGrid::new(radius);
    for (i, p) in cloud.positions.iter().enumerate() {
        grid.insert(p, i);
    }
    let r2 = radius * radius;
    let mut selected = vec![false; cloud.len()];
    for &a in anchors {
        selected[a] = true;
        let pa = &cloud.positions[a];
        for k in grid.neighbours(pa) {
            if !selected[k] && (cloud.positions[k] - pa).norm_squared() <= r2 {
                selected[k] = true;
            }
        }
    }
    Ok(selected
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(i, _)| i)
        .collect())
}
