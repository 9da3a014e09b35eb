use std::hash::Hasher;

use geofuse_core::rng::Rng64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::scatter::SparseFeatureMap;
use crate::layers::{relu_backward_inplace, relu_inplace, BatchNorm, BnCache, Dense, Grid, Mode, Pattern};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Width of the merged per-pixel descriptor.
pub const MERGED_CHANNELS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    /// Occupied pixels take the fused affine map, the rest a color-only one.
    Local,
    /// One fused affine map everywhere, zeros where no feature landed.
    Padding,
}

/// Per-pixel affine map to 64 channels followed by a shared batch norm and
/// ReLU. The "side" input is the per-pixel tensor every pixel has (RGB, or
/// decoder features for late merging); projected point features are
/// concatenated in front of it on the fused path.
#[derive(Clone, Debug)]
pub struct PixelMerge {
    pub mode: MergeMode,
    pub side_channels: usize,
    pub feature_channels: usize,
    pub fused: Option<Dense>,
    pub plain: Option<Dense>,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct MergeCache<T> {
    pub grid: Grid,
    pub fused_rows: Vec<usize>,
    fused_input: Vec<T>,
    pub plain_rows: Vec<usize>,
    plain_input: Vec<T>,
    bn: BnCache<T>,
    pub output: Vec<T>,
}

impl<T: Real> Pattern for MergeCache<T> {
    fn feed_pattern(&self, h: &mut dyn Hasher) {
        for &r in &self.fused_rows {
            h.write_usize(r);
        }
        for &v in &self.output {
            h.write_u8((v > T::zero()) as u8);
        }
    }
}

/// Gradients leaving a merge: per-pixel side input and feature map values.
#[derive(Clone, Debug)]
pub struct MergeGrads<T> {
    pub side: Option<Vec<T>>,
    pub features: Vec<T>,
}

impl PixelMerge {
    /// `prefix` + `fused`, `plain`, `bn` name the parameter groups.
    pub fn new(prefix: &str, plain_name: &str, mode: MergeMode, side_channels: usize, feature_channels: usize) -> Self {
        let fused = Dense::new(format!("{prefix}fused"), feature_channels + side_channels, MERGED_CHANNELS);
        let plain = (mode == MergeMode::Local).then(|| Dense::new(format!("{prefix}{plain_name}"), side_channels, MERGED_CHANNELS));
        Self {
            mode,
            side_channels,
            feature_channels,
            fused: Some(fused),
            plain,
            bn: BatchNorm::new(format!("{prefix}bn"), MERGED_CHANNELS),
        }
    }

    /// Color-only variant: every pixel takes the plain path.
    pub fn plain_only(prefix: &str, plain_name: &str, side_channels: usize) -> Self {
        Self {
            mode: MergeMode::Local,
            side_channels,
            feature_channels: 0,
            fused: None,
            plain: Some(Dense::new(format!("{prefix}{plain_name}"), side_channels, MERGED_CHANNELS)),
            bn: BatchNorm::new(format!("{prefix}bn"), MERGED_CHANNELS),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng64) {
        if let Some(d) = &self.fused {
            d.register(store, rng);
        }
        if let Some(d) = &self.plain {
            d.register(store, rng);
        }
        self.bn.register(store);
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        side: &[T],
        fmap: Option<&SparseFeatureMap<T>>,
        grid: Grid,
        mode: Mode,
    ) -> Result<(Vec<T>, MergeCache<T>)> {
        let pixels = grid.pixels();
        let s = self.side_channels;
        if side.len() != pixels * s {
            return Err(Error::ShapeMismatch(format!("merge: expected {pixels} x {s} side values, got {}", side.len())));
        }
        if let Some(m) = fmap {
            if m.grid != grid || m.channels != self.feature_channels || self.fused.is_none() {
                return Err(Error::ShapeMismatch(format!(
                    "merge: feature map {}x{}x{} does not fit {}x{}x{}",
                    m.grid.height, m.grid.width, m.channels, grid.height, grid.width, self.feature_channels
                )));
            }
        }
        let use_fused = |p: usize| match (self.mode, fmap) {
            _ if self.fused.is_none() => false,
            (MergeMode::Padding, _) => true,
            (MergeMode::Local, Some(m)) => m.occupied(p),
            (MergeMode::Local, None) => false,
        };
        let (fused_rows, plain_rows): (Vec<usize>, Vec<usize>) = (0..pixels).partition(|&p| use_fused(p));

        let f = self.feature_channels;
        let mut fused_input = Vec::with_capacity(fused_rows.len() * (f + s));
        for &p in &fused_rows {
            match fmap {
                Some(m) => fused_input.extend_from_slice(m.pixel(p)),
                None => fused_input.extend(std::iter::repeat(T::zero()).take(f)),
            }
            fused_input.extend_from_slice(&side[p * s..(p + 1) * s]);
        }
        let mut plain_input = Vec::with_capacity(plain_rows.len() * s);
        for &p in &plain_rows {
            plain_input.extend_from_slice(&side[p * s..(p + 1) * s]);
        }

        let c = MERGED_CHANNELS;
        let mut z = vec![T::zero(); pixels * c];
        if let Some(d) = &self.fused {
            if !fused_rows.is_empty() {
                let zf = d.forward(store, &fused_input, fused_rows.len())?;
                for (row, &p) in zf.chunks_exact(c).zip(&fused_rows) {
                    z[p * c..(p + 1) * c].copy_from_slice(row);
                }
            }
        }
        if let Some(d) = &self.plain {
            if !plain_rows.is_empty() {
                let zp = d.forward(store, &plain_input, plain_rows.len())?;
                for (row, &p) in zp.chunks_exact(c).zip(&plain_rows) {
                    z[p * c..(p + 1) * c].copy_from_slice(row);
                }
            }
        }
        let (mut y, bn) = self.bn.forward(store, &z, pixels, mode)?;
        relu_inplace(&mut y);
        Ok((
            y.clone(),
            MergeCache {
                grid,
                fused_rows,
                fused_input,
                plain_rows,
                plain_input,
                bn,
                output: y,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &MergeCache<T>,
        mut dy: Vec<T>,
        need_side: bool,
    ) -> Result<MergeGrads<T>> {
        let c = MERGED_CHANNELS;
        let (s, f) = (self.side_channels, self.feature_channels);
        let pixels = cache.grid.pixels();
        relu_backward_inplace(&cache.output, &mut dy);
        let dz = self.bn.backward(store, &cache.bn, &dy)?;
        let gather = |rows: &[usize]| {
            let mut out = Vec::with_capacity(rows.len() * c);
            for &p in rows {
                out.extend_from_slice(&dz[p * c..(p + 1) * c]);
            }
            out
        };
        let mut d_side = need_side.then(|| vec![T::zero(); pixels * s]);
        let mut d_feat = vec![T::zero(); pixels * f];
        if let (Some(d), false) = (&self.fused, cache.fused_rows.is_empty()) {
            let dzf = gather(&cache.fused_rows);
            let dx = d
                .backward(store, &cache.fused_input, cache.fused_rows.len(), &dzf, true)?
                .expect("requested");
            for (row, &p) in dx.chunks_exact(f + s).zip(&cache.fused_rows) {
                d_feat[p * f..(p + 1) * f].copy_from_slice(&row[..f]);
                if let Some(ds) = d_side.as_mut() {
                    ds[p * s..(p + 1) * s].copy_from_slice(&row[f..]);
                }
            }
        }
        if let (Some(d), false) = (&self.plain, cache.plain_rows.is_empty()) {
            let dzp = gather(&cache.plain_rows);
            let dx = d.backward(store, &cache.plain_input, cache.plain_rows.len(), &dzp, need_side)?;
            if let (Some(dx), Some(ds)) = (dx, d_side.as_mut()) {
                for (row, &p) in dx.chunks_exact(s).zip(&cache.plain_rows) {
                    ds[p * s..(p + 1) * s].copy_from_slice(row);
                }
            }
        }
        Ok(MergeGrads {
            side: d_side,
            features: d_feat,
        })
    }

    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &MergeCache<T>) -> Result<()> {
        self.bn.commit(store, &cache.bn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::scatter::NO_SOURCE;

    fn setup(mode: MergeMode) -> (PixelMerge, ParamStore<f64>) {
        let m = PixelMerge::new("merge/", "rgb", mode, 3, 2);
        let mut store = ParamStore::new();
        m.register(&mut store, &mut Rng64::new(3));
        (m, store)
    }

    #[test]
    fn empty_map_uses_color_path_only() {
        let (m, mut store) = setup(MergeMode::Local);
        let grid = Grid { height: 2, width: 2 };
        let rgb: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let fmap = SparseFeatureMap::<f64>::empty(grid, 2);
        let (a, _) = m.forward(&store, &rgb, Some(&fmap), grid, Mode::Train).unwrap();
        store.get_mut("merge/fused.weight").unwrap().value.data.iter_mut().for_each(|w| *w += 1.0);
        let (b, _) = m.forward(&store, &rgb, Some(&fmap), grid, Mode::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_features_make_padding_uniform() {
        let (m, store) = setup(MergeMode::Padding);
        let grid = Grid { height: 1, width: 2 };
        let rgb = vec![0.2, 0.4, 0.6, 0.2, 0.4, 0.6];
        let mut fmap = SparseFeatureMap::<f64>::empty(grid, 2);
        fmap.source_index[0] = 0;
        fmap.source_depth[0] = 1.0;
        assert_eq!(fmap.source_index[1], NO_SOURCE);
        let (y, _) = m.forward(&store, &rgb, Some(&fmap), grid, Mode::Eval).unwrap();
        assert_eq!(y[..64], y[64..]);
    }

    #[test]
    fn shape_mismatch() {
        let (m, store) = setup(MergeMode::Local);
        let grid = Grid { height: 1, width: 2 };
        let fmap = SparseFeatureMap::<f64>::empty(grid, 5);
        assert!(m.forward(&store, &[0.0; 6], Some(&fmap), grid, Mode::Eval).is_err());
        assert!(m.forward(&store, &[0.0; 5], None, grid, Mode::Eval).is_err());
    }
}
