//! Layer primitives with hand-written reverse passes.
//!
//! Layers are stateless descriptors: parameters live in a [`ParamStore`]
//! under `<layer name>.<suffix>`, and forward passes return explicit caches
//! that the matching backward pass consumes. Activations are row-major
//! `rows x channels`; images are stored height-major with channels last, so
//! one pixel is one row.

use std::hash::Hasher;

use geofuse_core::rng::Rng64;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{gemm, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics collected in the cache.
    Train,
    /// Running statistics.
    Eval,
}

/// Records the non-smooth decisions of a forward pass (ReLU signs, max-pool
/// winners). Two passes with equal patterns evaluate the same smooth piece.
pub trait Pattern {
    fn feed_pattern(&self, h: &mut dyn Hasher);
}

fn feed_positive<T: Real>(values: &[T], h: &mut dyn Hasher) {
    let mut word = 0u64;
    for (i, v) in values.iter().enumerate() {
        if *v > T::zero() {
            word |= 1 << (i % 64);
        }
        if i % 64 == 63 {
            h.write_u64(word);
            word = 0;
        }
    }
    h.write_u64(word);
}

/// Fully connected map `y = x W^T + b` applied to every row.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub bias: bool,
    weight_shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.into(),
            inputs,
            outputs,
            bias: true,
            weight_shape: vec![outputs, inputs],
            fan_in: inputs,
            fan_out: outputs,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Uniform Glorot weights `U(-s, s)`, `s = sqrt(6 / (fan_in + fan_out))`;
    /// zero bias.
    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng64) {
        let bound = (6.0 / (self.fan_in + self.fan_out) as f64).sqrt();
        let count = self.inputs * self.outputs;
        let data = (0..count).map(|_| T::of(bound * (2.0 * rng.uniform() - 1.0))).collect();
        store.insert(self.weight_name(), ParamKind::Weight, Tensor::from_vec(&self.weight_shape, data));
        if self.bias {
            store.insert(self.bias_name(), ParamKind::Bias, Tensor::zeros(&[self.outputs]));
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &[T], rows: usize) -> Result<Vec<T>> {
        check_len(&self.name, x.len(), rows * self.inputs)?;
        let w = store.value_checked(&self.weight_name(), self.inputs * self.outputs)?;
        let mut y = vec![T::zero(); rows * self.outputs];
        let beta = if self.bias {
            let b = store.value_checked(&self.bias_name(), self.outputs)?;
            for row in y.chunks_exact_mut(self.outputs) {
                row.copy_from_slice(b);
            }
            T::one()
        } else {
            T::zero()
        };
        gemm(false, true, rows, self.outputs, self.inputs, T::one(), x, w, beta, &mut y);
        Ok(y)
    }

    /// Accumulates weight/bias gradients; returns `dL/dx` when asked.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &[T],
        rows: usize,
        dy: &[T],
        need_dx: bool,
    ) -> Result<Option<Vec<T>>> {
        check_len(&self.name, x.len(), rows * self.inputs)?;
        check_len(&self.name, dy.len(), rows * self.outputs)?;
        store.value_checked(&self.weight_name(), self.inputs * self.outputs)?;
        let p = store.get_mut(&self.weight_name())?;
        gemm(true, false, self.outputs, self.inputs, rows, T::one(), dy, x, T::one(), &mut p.grad.data);
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); rows * self.inputs];
            gemm(false, false, rows, self.inputs, self.outputs, T::one(), dy, &p.value.data, T::zero(), &mut dx);
            dx
        });
        if self.bias {
            let b = store.get_mut(&self.bias_name())?;
            for row in dy.chunks_exact(self.outputs) {
                for (g, &d) in b.grad.data.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        Ok(dx)
    }
}

fn check_len(name: &str, actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::ShapeMismatch(format!("{name}: expected {expected} values, got {actual}")));
    }
    Ok(())
}

/// Per-channel batch normalization over rows.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mode: Mode,
    pub rows: usize,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and biased variance (train mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    fn key(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>) {
        let c = [self.channels];
        store.insert(self.key("gamma"), ParamKind::Scale, Tensor::filled(&c, T::one()));
        store.insert(self.key("beta"), ParamKind::Shift, Tensor::zeros(&c));
        store.insert(self.key("running_mean"), ParamKind::RunningMean, Tensor::zeros(&c));
        store.insert(self.key("running_var"), ParamKind::RunningVar, Tensor::filled(&c, T::one()));
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &[T], rows: usize, mode: Mode) -> Result<(Vec<T>, BnCache<T>)> {
        let c = self.channels;
        check_len(&self.name, x.len(), rows * c)?;
        let gamma = store.value_checked(&self.key("gamma"), c)?;
        let beta = store.value_checked(&self.key("beta"), c)?;
        let eps = T::of(BN_EPS);
        let (mean, var, batch_mean, batch_var) = match mode {
            Mode::Train => {
                if rows == 0 {
                    return Err(Error::EmptyInput(format!("{}: batch statistics of zero rows", self.name)));
                }
                let n = T::of(rows as f64);
                let mut mean = vec![T::zero(); c];
                for row in x.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); c];
                for row in x.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / n);
                (mean.clone(), var.clone(), mean, var)
            }
            Mode::Eval => {
                let rm = store.value_checked(&self.key("running_mean"), c)?.to_vec();
                let rv = store.value_checked(&self.key("running_var"), c)?.to_vec();
                (rm, rv, Vec::new(), Vec::new())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for ((xr, hr), yr) in x.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(y.chunks_exact_mut(c)) {
            for k in 0..c {
                let h = (xr[k] - mean[k]) * inv_std[k];
                hr[k] = h;
                yr[k] = gamma[k] * h + beta[k];
            }
        }
        Ok((
            y,
            BnCache {
                mode,
                rows,
                xhat,
                inv_std,
                batch_mean,
                batch_var,
            },
        ))
    }

    /// Folds a train-mode batch into the running statistics (momentum 0.1,
    /// unbiased variance when the batch has more than one row).
    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &BnCache<T>) -> Result<()> {
        if cache.mode != Mode::Train {
            return Ok(());
        }
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        let correction = if cache.rows > 1 {
            T::of(cache.rows as f64 / (cache.rows - 1) as f64)
        } else {
            T::one()
        };
        let rm = store.get_mut(&self.key("running_mean"))?;
        for (r, &b) in rm.value.data.iter_mut().zip(&cache.batch_mean) {
            *r = keep * *r + m * b;
        }
        let rv = store.get_mut(&self.key("running_var"))?;
        for (r, &b) in rv.value.data.iter_mut().zip(&cache.batch_var) {
            *r = keep * *r + m * b * correction;
        }
        Ok(())
    }

    pub fn backward<T: Real>(&self, store: &mut ParamStore<T>, cache: &BnCache<T>, dy: &[T]) -> Result<Vec<T>> {
        let c = self.channels;
        check_len(&self.name, dy.len(), cache.rows * c)?;
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (dr, hr) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for k in 0..c {
                sum_dy[k] += dr[k];
                sum_dy_xhat[k] += dr[k] * hr[k];
            }
        }
        {
            let g = store.get_mut(&self.key("gamma"))?;
            for (acc, &s) in g.grad.data.iter_mut().zip(&sum_dy_xhat) {
                *acc += s;
            }
            let b = store.get_mut(&self.key("beta"))?;
            for (acc, &s) in b.grad.data.iter_mut().zip(&sum_dy) {
                *acc += s;
            }
        }
        let gamma = store.value_checked(&self.key("gamma"), c)?;
        let mut dx = vec![T::zero(); dy.len()];
        match cache.mode {
            Mode::Eval => {
                for (xr, dr) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
                    for k in 0..c {
                        xr[k] = dr[k] * gamma[k] * cache.inv_std[k];
                    }
                }
            }
            Mode::Train => {
                // dx = g * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
                let n = T::of(cache.rows as f64);
                let scale: Vec<T> = (0..c).map(|k| gamma[k] * cache.inv_std[k]).collect();
                let mean_dy: Vec<T> = sum_dy.iter().map(|&s| s / n).collect();
                let mean_dyx: Vec<T> = sum_dy_xhat.iter().map(|&s| s / n).collect();
                for ((xr, dr), hr) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(cache.xhat.chunks_exact(c)) {
                    for k in 0..c {
                        xr[k] = scale[k] * (dr[k] - mean_dy[k] - hr[k] * mean_dyx[k]);
                    }
                }
            }
        }
        Ok(dx)
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x.iter_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Masks `dy` where the ReLU output `y` was clamped.
pub fn relu_backward_inplace<T: Real>(y: &[T], dy: &mut [T]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if !(v > T::zero()) {
            *d = T::zero();
        }
    }
}

/// Dense -> BatchNorm -> ReLU on rows.
#[derive(Clone, Debug)]
pub struct DenseBnRelu {
    pub dense: Dense,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct DenseBnReluCache<T> {
    pub input: Vec<T>,
    pub bn: BnCache<T>,
    pub output: Vec<T>,
}

impl<T: Real> Pattern for DenseBnReluCache<T> {
    fn feed_pattern(&self, h: &mut dyn Hasher) {
        feed_positive(&self.output, h);
    }
}

impl DenseBnRelu {
    /// The linear part carries no bias: the batch norm shift subsumes it.
    pub fn new(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            dense: Dense::new(format!("{name}.linear"), inputs, outputs).without_bias(),
            bn: BatchNorm::new(format!("{name}.bn"), outputs),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng64) {
        self.dense.register(store, rng);
        self.bn.register(store);
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: Vec<T>,
        rows: usize,
        mode: Mode,
    ) -> Result<(Vec<T>, DenseBnReluCache<T>)> {
        let z = self.dense.forward(store, &x, rows)?;
        let (mut y, bn) = self.bn.forward(store, &z, rows, mode)?;
        relu_inplace(&mut y);
        Ok((
            y.clone(),
            DenseBnReluCache {
                input: x,
                bn,
                output: y,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &DenseBnReluCache<T>,
        mut dy: Vec<T>,
        need_dx: bool,
    ) -> Result<Option<Vec<T>>> {
        relu_backward_inplace(&cache.output, &mut dy);
        let dz = self.bn.backward(store, &cache.bn, &dy)?;
        self.dense.backward(store, &cache.input, cache.bn.rows, &dz, need_dx)
    }

    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &DenseBnReluCache<T>) -> Result<()> {
        self.bn.commit(store, &cache.bn)
    }
}

/// Channels-last image geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn pixels(self) -> usize {
        self.height * self.width
    }

    pub fn halved(self) -> Grid {
        Grid {
            height: self.height / 2,
            width: self.width / 2,
        }
    }

    pub fn doubled(self) -> Grid {
        Grid {
            height: self.height * 2,
            width: self.width * 2,
        }
    }
}

/// 3x3 patches around every pixel, zero padded: row `p` of the result holds
/// the `(ky, kx, channel)` neighborhood of pixel `p`.
pub fn im2col<T: Real>(x: &[T], grid: Grid, channels: usize) -> Vec<T> {
    let (h, w, c) = (grid.height, grid.width, channels);
    let patch = 9 * c;
    let mut cols = vec![T::zero(); h * w * patch];
    for y in 0..h {
        for xx in 0..w {
            let dst_row = (y * w + xx) * patch;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = dst_row + (ky * 3 + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Transpose of [`im2col`]: row `(ky, kx, channel)` holds that tap for
/// every pixel. Built from channel planes, so each row is a run of shifted
/// copies.
pub fn im2col_t<T: Real>(x: &[T], grid: Grid, channels: usize) -> Vec<T> {
    let (h, w, c) = (grid.height, grid.width, channels);
    let p = h * w;
    let mut planes = vec![T::zero(); c * p];
    for (i, px) in x.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            planes[ch * p + i] = v;
        }
    }
    let mut out = vec![T::zero(); 9 * c * p];
    for ky in 0..3 {
        for kx in 0..3 {
            // Output columns whose source column sx = col + kx - 1 is inside.
            let (c0, c1) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
            for ch in 0..c {
                let row = &mut out[((ky * 3 + kx) * c + ch) * p..][..p];
                let plane = &planes[ch * p..][..p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize || c0 >= c1 {
                        continue;
                    }
                    let src = sy as usize * w + c0 + kx - 1;
                    row[y * w + c0..y * w + c1].copy_from_slice(&plane[src..src + (c1 - c0)]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Real>(cols: &[T], grid: Grid, channels: usize) -> Vec<T> {
    let (h, w, c) = (grid.height, grid.width, channels);
    let patch = 9 * c;
    let mut x = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let src_row = (y * w + xx) * patch;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = src_row + (ky * 3 + kx) * c;
                    for (d, &s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// 3x3 convolution, stride 1, zero padding 1, no bias. Weight shape
/// `[out, 3, 3, in]`.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub dense: Dense,
    pub inputs: usize,
    pub outputs: usize,
}

impl Conv3x3 {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        let mut dense = Dense::new(name, 9 * inputs, outputs).without_bias();
        dense.weight_shape = vec![outputs, 3, 3, inputs];
        dense.fan_in = 9 * inputs;
        dense.fan_out = 9 * outputs;
        Self { dense, inputs, outputs }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng64) {
        self.dense.register(store, rng);
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &[T], grid: Grid) -> Result<Vec<T>> {
        check_len(&self.dense.name, x.len(), grid.pixels() * self.inputs)?;
        let k = 9 * self.inputs;
        let wt = store.value_checked(&self.dense.weight_name(), self.outputs * k)?;
        let cols_t = im2col_t(x, grid, self.inputs);
        let p = grid.pixels();
        let mut y = vec![T::zero(); p * self.outputs];
        // y^T = W cols^T, written column-major so `y` comes out pixel-major.
        // SAFETY: every buffer holds exactly the extents passed.
        unsafe {
            T::gemm_raw(
                self.outputs,
                k,
                p,
                T::one(),
                wt.as_ptr(),
                k as isize,
                1,
                cols_t.as_ptr(),
                p as isize,
                1,
                T::zero(),
                y.as_mut_ptr(),
                1,
                self.outputs as isize,
            );
        }
        Ok(y)
    }

    /// `x` is the forward input.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &[T],
        grid: Grid,
        dy: &[T],
        need_dx: bool,
    ) -> Result<Option<Vec<T>>> {
        check_len(&self.dense.name, x.len(), grid.pixels() * self.inputs)?;
        let cols = im2col(x, grid, self.inputs);
        let dcols = self.dense.backward(store, &cols, grid.pixels(), dy, need_dx)?;
        Ok(dcols.map(|d| col2im(&d, grid, self.inputs)))
    }
}

/// Conv3x3 -> BatchNorm -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv3x3,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct ConvBnReluCache<T> {
    pub grid: Grid,
    pub input: Vec<T>,
    pub bn: BnCache<T>,
    pub output: Vec<T>,
}

impl<T: Real> Pattern for ConvBnReluCache<T> {
    fn feed_pattern(&self, h: &mut dyn Hasher) {
        feed_positive(&self.output, h);
    }
}

impl ConvBnRelu {
    pub fn new(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            conv: Conv3x3::new(format!("{name}.conv"), inputs, outputs),
            bn: BatchNorm::new(format!("{name}.bn"), outputs),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng64) {
        self.conv.register(store, rng);
        self.bn.register(store);
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        grid: Grid,
        mode: Mode,
    ) -> Result<(Vec<T>, ConvBnReluCache<T>)> {
        let z = self.conv.forward(store, x, grid)?;
        let (mut y, bn) = self.bn.forward(store, &z, grid.pixels(), mode)?;
        relu_inplace(&mut y);
        Ok((
            y.clone(),
            ConvBnReluCache {
                grid,
                input: x.to_vec(),
                bn,
                output: y,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ConvBnReluCache<T>,
        mut dy: Vec<T>,
        need_dx: bool,
    ) -> Result<Option<Vec<T>>> {
        relu_backward_inplace(&cache.output, &mut dy);
        let dz = self.bn.backward(store, &cache.bn, &dy)?;
        self.conv.backward(store, &cache.input, cache.grid, &dz, need_dx)
    }

    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &ConvBnReluCache<T>) -> Result<()> {
        self.bn.commit(store, &cache.bn)
    }
}

/// 2x2 max pooling with stride 2. The winner inside each window is stored
/// as 0..4 in scan order; ties go to the first.
#[derive(Clone, Debug)]
pub struct PoolCache {
    pub grid: Grid,
    pub channels: usize,
    pub argmax: Vec<u8>,
}

impl Pattern for PoolCache {
    fn feed_pattern(&self, h: &mut dyn Hasher) {
        h.write(&self.argmax);
    }
}

pub fn max_pool2<T: Real>(x: &[T], grid: Grid, channels: usize) -> (Vec<T>, PoolCache) {
    let out = grid.halved();
    let c = channels;
    let mut y = vec![T::zero(); out.pixels() * c];
    let mut argmax = vec![0u8; out.pixels() * c];
    for oy in 0..out.height {
        for ox in 0..out.width {
            let o = (oy * out.width + ox) * c;
            let src = |k: usize| {
                let (dy, dx) = (k / 2, k % 2);
                ((2 * oy + dy) * grid.width + 2 * ox + dx) * c
            };
            y[o..o + c].copy_from_slice(&x[src(0)..src(0) + c]);
            for k in 1..4u8 {
                let s = src(k as usize);
                for ch in 0..c {
                    if x[s + ch] > y[o + ch] {
                        y[o + ch] = x[s + ch];
                        argmax[o + ch] = k;
                    }
                }
            }
        }
    }
    (
        y,
        PoolCache {
            grid,
            channels,
            argmax,
        },
    )
}

pub fn max_pool2_backward<T: Real>(cache: &PoolCache, dy: &[T]) -> Vec<T> {
    let (grid, c) = (cache.grid, cache.channels);
    let out = grid.halved();
    let mut dx = vec![T::zero(); grid.pixels() * c];
    for oy in 0..out.height {
        for ox in 0..out.width {
            let o = (oy * out.width + ox) * c;
            for ch in 0..c {
                let k = cache.argmax[o + ch] as usize;
                let (dyy, dxx) = (k / 2, k % 2);
                dx[((2 * oy + dyy) * grid.width + 2 * ox + dxx) * c + ch] += dy[o + ch];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling; `grid` is the input size.
pub fn upsample2<T: Real>(x: &[T], grid: Grid, channels: usize) -> Vec<T> {
    let out = grid.doubled();
    let c = channels;
    let mut y = vec![T::zero(); out.pixels() * c];
    for oy in 0..out.height {
        for ox in 0..out.width {
            let s = ((oy / 2) * grid.width + ox / 2) * c;
            let d = (oy * out.width + ox) * c;
            y[d..d + c].copy_from_slice(&x[s..s + c]);
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &[T], grid: Grid, channels: usize) -> Vec<T> {
    let out = grid.doubled();
    let c = channels;
    let mut dx = vec![T::zero(); grid.pixels() * c];
    for oy in 0..out.height {
        for ox in 0..out.width {
            let s = ((oy / 2) * grid.width + ox / 2) * c;
            let d = (oy * out.width + ox) * c;
            for (a, &b) in dx[s..s + c].iter_mut().zip(&dy[d..d + c]) {
                *a += b;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn glorot_bound() {
        let mut store = ParamStore::<f64>::new();
        Dense::new("l", 3, 64).register(&mut store, &mut Rng64::new(0));
        let bound = (6.0f64 / 67.0).sqrt();
        assert!((bound - 0.2992).abs() < 1e-4);
        assert!(store.value("l.weight").unwrap().iter().all(|w| w.abs() <= bound));
        assert!(store.value("l.bias").unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn eval_bn_at_init_matches_train_on_standardized_batch() {
        let bn = BatchNorm::new("bn", 2);
        let mut store = ParamStore::<f64>::new();
        bn.register(&mut store);
        // Columns with mean 0 and biased variance 1.
        let x = vec![1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0];
        let (train, _) = bn.forward(&store, &x, 4, Mode::Train).unwrap();
        let (eval, _) = bn.forward(&store, &x, 4, Mode::Eval).unwrap();
        for (a, b) in train.iter().zip(&eval) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn running_stats_update() {
        let bn = BatchNorm::new("bn", 1);
        let mut store = ParamStore::<f64>::new();
        bn.register(&mut store);
        let (_, cache) = bn.forward(&store, &[1.0, 3.0], 2, Mode::Train).unwrap();
        bn.commit(&mut store, &cache).unwrap();
        assert!((store.value("bn.running_mean").unwrap()[0] - 0.2).abs() < 1e-15);
        // Unbiased batch variance 2 -> 0.9 * 1 + 0.1 * 2.
        assert!((store.value("bn.running_var").unwrap()[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn transposed_patches_match_row_patches() {
        for (h, w, ch) in [(1, 1, 2), (2, 3, 1), (4, 4, 3), (5, 2, 2)] {
            let grid = Grid { height: h, width: w };
            let x: Vec<f64> = (0..h * w * ch).map(|i| i as f64 + 1.0).collect();
            let rows = im2col(&x, grid, ch);
            let cols = im2col_t(&x, grid, ch);
            let (p, k) = (h * w, 9 * ch);
            for i in 0..p {
                for j in 0..k {
                    assert_eq!(rows[i * k + j], cols[j * p + i], "{h}x{w}x{ch} pixel {i} tap {j}");
                }
            }
        }
    }

    #[test]
    fn im2col_adjoint_identity() {
        // <im2col(x), c> == <x, col2im(c)>
        let grid = Grid { height: 4, width: 6 };
        let ch = 3;
        let x: Vec<f64> = (0..grid.pixels() * ch).map(|i| (i as f64 * 0.7).sin()).collect();
        let c: Vec<f64> = (0..grid.pixels() * ch * 9).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs = dot(&im2col(&x, grid, ch), &c);
        let rhs = dot(&x, &col2im(&c, grid, ch));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_adjoint_identity() {
        let grid = Grid { height: 3, width: 2 };
        let x: Vec<f64> = (0..12).map(|i| i as f64 - 4.0).collect();
        let d: Vec<f64> = (0..48).map(|i| (i as f64).sqrt()).collect();
        let lhs = dot(&upsample2(&x, grid, 2), &d);
        let rhs = dot(&x, &upsample2_backward(&d, grid, 2));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_ties_go_to_first() {
        let grid = Grid { height: 2, width: 2 };
        let (y, cache) = max_pool2(&[1.0f64, 5.0, 5.0, 2.0], grid, 1);
        assert_eq!(y, vec![5.0]);
        assert_eq!(cache.argmax, vec![1]);
        assert_eq!(max_pool2_backward(&cache, &[3.0]), vec![0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let grid = Grid { height: 3, width: 4 };
        let conv = Conv3x3::new("c", 2, 3);
        let mut store = ParamStore::<f64>::new();
        conv.register(&mut store, &mut Rng64::new(4));
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.9).sin()).collect();
        let y = conv.forward(&store, &x, grid).unwrap();
        let w = store.value("c.weight").unwrap();
        for oy in 0..3i64 {
            for ox in 0..4i64 {
                for o in 0..3 {
                    let mut s = 0.0;
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (oy + ky - 1, ox + kx - 1);
                            if !(0..3).contains(&sy) || !(0..4).contains(&sx) {
                                continue;
                            }
                            for i in 0..2 {
                                s += w[((o * 3 + ky as usize) * 3 + kx as usize) * 2 + i]
                                    * x[((sy * 4 + sx) as usize) * 2 + i];
                            }
                        }
                    }
                    assert!((y[((oy * 4 + ox) as usize) * 3 + o] - s).abs() < 1e-12);
                }
            }
        }
    }
}
