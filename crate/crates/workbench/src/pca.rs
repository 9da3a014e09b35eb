//! False-color view of a sparse feature map: the top three principal
//! components of the occupied pixels' feature vectors, min-max scaled.

use geofuse_nn::fusion::SparseFeatureMap;
use geofuse_nn::tensor::Real;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Result, WorkbenchError};

/// Fewest occupied pixels a PCA is fitted on.
pub const MIN_OCCUPIED: usize = 3;
/// A component whose score range is below this fraction of the leading
/// component's range counts as having no variance.
pub const FLAT_RANGE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB in `[0, 1]`; unoccupied pixels are black.
    pub rgb: Vec<f32>,
    /// Covariance eigenvalues of the three components, descending.
    pub component_variance: [f64; 3],
    /// Trace of the covariance.
    pub total_variance: f64,
}

impl PcaImage {
    /// Share of the total variance the three components carry.
    pub fn explained_fraction(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        self.component_variance.iter().sum::<f64>() / self.total_variance
    }
}

pub fn export_feature_pca<T: Real>(fmap: &SparseFeatureMap<T>) -> Result<PcaImage> {
    let pixels = fmap.occupied_pixels();
    let n = pixels.len();
    if n < MIN_OCCUPIED {
        return Err(WorkbenchError::Data(format!(
            "feature PCA needs at least {MIN_OCCUPIED} occupied pixels, found {n}"
        )));
    }
    let c = fmap.channels;
    let mut mean = vec![0.0f64; c];
    for &p in &pixels {
        for (m, v) in mean.iter_mut().zip(fmap.pixel(p)) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, c, |i, j| fmap.pixel(pixels[i])[j].as_f64() - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let k = c.min(3);
    let mut component_variance = [0.0; 3];
    let mut scores = vec![[0.0f64; 3]; n];
    for (slot, &e) in order.iter().take(k).enumerate() {
        component_variance[slot] = eig.eigenvalues[e].max(0.0);
        let mut v = eig.eigenvectors.column(e).into_owned();
        // Sign: the largest-magnitude entry is positive.
        let lead = (0..c).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a))).unwrap();
        if v[lead] < 0.0 {
            v = -v;
        }
        let proj = &centered * v;
        for (s, p) in scores.iter_mut().zip(proj.iter()) {
            s[slot] = *p;
        }
    }

    let range = |slot: usize| {
        let (lo, hi) = scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s[slot]), hi.max(s[slot])));
        (lo, hi - lo)
    };
    let lead_range = range(0).1;
    let (w, h) = (fmap.grid.width, fmap.grid.height);
    let mut rgb = vec![0.0f32; w * h * 3];
    for slot in 0..3 {
        let (lo, span) = range(slot);
        let flat = slot >= k || span <= FLAT_RANGE * lead_range.max(f64::MIN_POSITIVE) || span == 0.0;
        for (s, &p) in scores.iter().zip(&pixels) {
            rgb[p * 3 + slot] = if flat { 0.5 } else { ((s[slot] - lo) / span) as f32 };
        }
    }
    Ok(PcaImage {
        width: w,
        height: h,
        rgb,
        component_variance,
        total_variance,
    })
}
