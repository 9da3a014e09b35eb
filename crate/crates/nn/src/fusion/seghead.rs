//! Small convolutional encoder-decoder producing per-pixel logits.
//!
//! Three encoder stages (conv, BN, ReLU, 2x2 max pool; 64 -> 64 -> 128 ->
//! 128 channels) and three decoder stages (nearest 2x upsampling, additive
//! skip from the encoder stage at that resolution, conv, BN, ReLU), then a
//! per-pixel linear classifier.

use std::hash::Hasher;

use geofuse_core::rng::Rng64;

use crate::error::{Error, Result};
use crate::layers::{
    max_pool2, max_pool2_backward, upsample2, upsample2_backward, ConvBnRelu, ConvBnReluCache, Dense, Grid, Mode,
    Pattern, PoolCache,
};
use crate::params::ParamStore;
use crate::tensor::Real;

const ENC: [(usize, usize); 3] = [(64, 64), (64, 128), (128, 128)];
const DEC: [(usize, usize); 3] = [(128, 128), (128, 64), (64, 64)];

/// Channels entering and leaving the encoder-decoder trunk.
pub const TRUNK_CHANNELS: usize = 64;

#[derive(Clone, Debug)]
pub struct SegHead {
    pub classes: usize,
    enc: Vec<ConvBnRelu>,
    dec: Vec<ConvBnRelu>,
    pub classifier: Dense,
}

#[derive(Clone, Debug)]
pub struct TrunkCache<T> {
    pub grid: Grid,
    enc: Vec<ConvBnReluCache<T>>,
    pools: Vec<PoolCache>,
    dec: Vec<ConvBnReluCache<T>>,
}

impl<T: Real> Pattern for TrunkCache<T> {
    fn feed_pattern(&self, h: &mut dyn Hasher) {
        for c in self.enc.iter().chain(&self.dec) {
            c.feed_pattern(h);
        }
        for p in &self.pools {
            p.feed_pattern(h);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegCache<T> {
    pub trunk: TrunkCache<T>,
    /// Trunk output, classifier input.
    pub features: Vec<T>,
}

impl<T: Real> Pattern for SegCache<T> {
    fn feed_pattern(&self, h: &mut dyn Hasher) {
        self.trunk.feed_pattern(h);
    }
}

impl SegHead {
    pub fn new(prefix: &str, classes: usize) -> Self {
        let block = |stage: &str, i: usize, (a, b): (usize, usize)| ConvBnRelu::new(&format!("{prefix}{stage}{i}"), a, b);
        Self {
            classes,
            enc: ENC.iter().enumerate().map(|(i, &c)| block("enc", i, c)).collect(),
            dec: DEC.iter().enumerate().map(|(i, &c)| block("dec", i, c)).collect(),
            classifier: Dense::new(format!("{prefix}classifier"), TRUNK_CHANNELS, classes),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng64) {
        for b in self.enc.iter().chain(&self.dec) {
            b.register(store, rng);
        }
        self.classifier.register(store, rng);
    }

    pub fn check_grid(grid: Grid) -> Result<()> {
        if grid.height == 0 || grid.width == 0 || grid.height % 8 != 0 || grid.width % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {}x{} must be a positive multiple of 8",
                grid.width, grid.height
            )));
        }
        Ok(())
    }

    /// Encoder-decoder on a `pixels x 64` image; returns `pixels x 64`.
    pub fn trunk_forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        grid: Grid,
        mode: Mode,
    ) -> Result<(Vec<T>, TrunkCache<T>)> {
        Self::check_grid(grid)?;
        if x.len() != grid.pixels() * TRUNK_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "segmentation input: expected {} x {TRUNK_CHANNELS} values, got {}",
                grid.pixels(),
                x.len()
            )));
        }
        let mut enc = Vec::with_capacity(3);
        let mut pools = Vec::with_capacity(3);
        let mut g = grid;
        let mut cur = x.to_vec();
        for b in &self.enc {
            let (y, c) = b.forward(store, &cur, g, mode)?;
            let (p, pc) = max_pool2(&y, g, b.conv.outputs);
            enc.push(c);
            pools.push(pc);
            cur = p;
            g = g.halved();
        }
        let mut dec = Vec::with_capacity(3);
        for (i, b) in self.dec.iter().enumerate() {
            let skip = &enc[2 - i];
            let mut up = upsample2(&cur, g, b.conv.inputs);
            g = g.doubled();
            for (u, &s) in up.iter_mut().zip(&skip.output) {
                *u += s;
            }
            let (y, c) = b.forward(store, &up, g, mode)?;
            dec.push(c);
            cur = y;
        }
        Ok((cur, TrunkCache { grid, enc, pools, dec }))
    }

    /// Returns the gradient with respect to the trunk input when asked.
    pub fn trunk_backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &TrunkCache<T>,
        dy: Vec<T>,
        need_dx: bool,
    ) -> Result<Option<Vec<T>>> {
        if cache.enc.len() != 3 || cache.dec.len() != 3 || cache.pools.len() != 3 {
            return Err(Error::ShapeMismatch("segmentation cache is incomplete".into()));
        }
        // Decoder stage i adds the output of encoder stage 2 - i, so walking
        // the decoder backwards yields the skip gradients for encoder 0, 1, 2.
        let mut skip_grads: Vec<Vec<T>> = Vec::with_capacity(3);
        let mut d = dy;
        for (b, c) in self.dec.iter().zip(&cache.dec).rev() {
            let d_up = b.backward(store, c, d, true)?.expect("requested");
            d = upsample2_backward(&d_up, c.grid.halved(), b.conv.inputs);
            skip_grads.push(d_up);
        }
        for (k, (b, c)) in self.enc.iter().zip(&cache.enc).enumerate().rev() {
            let mut d_out = max_pool2_backward(&cache.pools[k], &d);
            for (a, &s) in d_out.iter_mut().zip(&skip_grads[k]) {
                *a += s;
            }
            let need = k > 0 || need_dx;
            match b.backward(store, c, d_out, need)? {
                Some(dx) => d = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(d))
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &[T], grid: Grid, mode: Mode) -> Result<(Vec<T>, SegCache<T>)> {
        let (features, trunk) = self.trunk_forward(store, x, grid, mode)?;
        let logits = self.classifier.forward(store, &features, grid.pixels())?;
        Ok((logits, SegCache { trunk, features }))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &SegCache<T>,
        d_logits: &[T],
        need_dx: bool,
    ) -> Result<Option<Vec<T>>> {
        let pixels = cache.trunk.grid.pixels();
        let d = self
            .classifier
            .backward(store, &cache.features, pixels, d_logits, true)?
            .expect("requested");
        self.trunk_backward(store, &cache.trunk, d, need_dx)
    }

    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &TrunkCache<T>) -> Result<()> {
        for (b, c) in self.enc.iter().zip(&cache.enc).chain(self.dec.iter().zip(&cache.dec)) {
            b.commit(store, c)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shape_and_grid_check() {
        let head = SegHead::new("seg/", 3);
        let mut store = ParamStore::<f32>::new();
        head.register(&mut store, &mut Rng64::new(1));
        let grid = Grid { height: 8, width: 16 };
        let x = vec![0.5f32; grid.pixels() * 64];
        let (logits, _) = head.forward(&store, &x, grid, Mode::Train).unwrap();
        assert_eq!(logits.len(), 8 * 16 * 3);
        let bad = Grid { height: 12, width: 16 };
        assert!(head.forward(&store, &vec![0.0f32; bad.pixels() * 64], bad, Mode::Eval).is_err());
    }
}
