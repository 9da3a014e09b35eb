//! PointNet segmentation encoder without input or feature transform nets.
//!
//! Per-point shared MLP to local features, a further per-point MLP whose
//! channel-wise max over the cloud gives one global vector, then a head MLP
//! on `[local, global]` per point. Batch norm normalizes over the points of
//! one cloud.
//!
//! The global vector is the same for every point, so per-cloud batch norm
//! would subtract its contribution right back out. The first head layer
//! therefore normalizes only the local part of its linear map and adds the
//! global part after the norm, before the ReLU. Weight shapes are those of a
//! plain linear layer on the concatenation.
//!
//! Rows are processed in a canonical order (lexicographic on the input
//! values), so batch sums and therefore every output are bitwise independent
//! of how the caller ordered the cloud.

use std::cmp::Ordering;
use std::hash::Hasher;

use serde::{Deserialize, Serialize};

use geofuse_core::rng::Rng64;

use crate::error::{Error, Result};
use crate::layers::{relu_backward_inplace, relu_inplace, Dense, DenseBnRelu, DenseBnReluCache, Mode, Pattern};
use crate::params::ParamStore;
use crate::tensor::{gemm, Real};

/// Feature width every projected point carries into the merge layer.
pub const FEATURE_CHANNELS: usize = 61;

/// Statistics the encoder's batch norm uses outside training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalStats {
    /// Statistics of the cloud being encoded, as during training. With one
    /// view per step this is the only choice that matches what the network
    /// was trained on.
    #[default]
    View,
    /// Running averages accumulated by training.
    Running,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub local_widths: Vec<usize>,
    pub global_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub out_channels: usize,
    /// Coordinate channels, always 3.
    pub input_channels: usize,
    /// Appends per-point color after xyz.
    pub use_rgb: bool,
    pub eval_stats: EvalStats,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            local_widths: vec![64, 64],
            global_widths: vec![64, 128, 1024],
            head_widths: vec![512, 256, 128],
            out_channels: FEATURE_CHANNELS,
            input_channels: 3,
            use_rgb: false,
            eval_stats: EvalStats::View,
        }
    }
}

impl NetConfig {
    /// Width of one input row.
    pub fn input_width(&self) -> usize {
        self.input_channels + if self.use_rgb { 3 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.input_channels != 3 {
            return bad("input_channels must be 3");
        }
        for (name, widths) in [
            ("local_widths", &self.local_widths),
            ("global_widths", &self.global_widths),
            ("head_widths", &self.head_widths),
        ] {
            if widths.is_empty() || widths.contains(&0) {
                return bad(&format!("{name} must be a nonempty list of positive widths"));
            }
        }
        if self.out_channels == 0 {
            return bad("out_channels must be positive");
        }
        Ok(())
    }

    /// The merge layer expects 61 feature channels; only test harnesses run
    /// the encoder at other widths.
    pub fn validate_for_pipeline(&self) -> Result<()> {
        self.validate()?;
        if self.out_channels != FEATURE_CHANNELS {
            return Err(Error::InvalidConfig(format!(
                "out_channels must be {FEATURE_CHANNELS}, got {}",
                self.out_channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LPointNet {
    pub cfg: NetConfig,
    local: Vec<DenseBnRelu>,
    global: Vec<DenseBnRelu>,
    head: Vec<DenseBnRelu>,
    out: Dense,
}

#[derive(Clone, Debug)]
pub struct PointNetCache<T> {
    pub points: usize,
    pub mode: Mode,
    local: Vec<DenseBnReluCache<T>>,
    global: Vec<DenseBnReluCache<T>>,
    head: Vec<DenseBnReluCache<T>>,
    /// Per global channel, the point attaining the max (lowest index on
    /// ties), in caller order.
    pub argmax: Vec<u32>,
    /// `order[k]` is the caller index of canonical row `k`.
    order: Vec<u32>,
    /// Inverse of `order`.
    rank: Vec<u32>,
    pub global_feature: Vec<T>,
}

impl<T: Real> Pattern for PointNetCache<T> {
    fn feed_pattern(&self, h: &mut dyn Hasher) {
        for c in self.local.iter().chain(&self.global).chain(&self.head) {
            c.feed_pattern(h);
        }
        for a in &self.argmax {
            h.write_u32(*a);
        }
    }
}

fn chain(prefix: &str, stage: &str, input: usize, widths: &[usize]) -> Vec<DenseBnRelu> {
    let mut width = input;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let block = DenseBnRelu::new(&format!("{prefix}{stage}{i}"), width, w);
            width = w;
            block
        })
        .collect()
}

impl LPointNet {
    /// Parameter names start with `prefix`, e.g. `p3d/`.
    pub fn new(cfg: &NetConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let local = chain(prefix, "local", cfg.input_width(), &cfg.local_widths);
        let local_out = *cfg.local_widths.last().unwrap();
        let global = chain(prefix, "global", local_out, &cfg.global_widths);
        let global_out = *cfg.global_widths.last().unwrap();
        let head = chain(prefix, "head", local_out + global_out, &cfg.head_widths);
        let out = Dense::new(format!("{prefix}out"), *cfg.head_widths.last().unwrap(), cfg.out_channels);
        Ok(Self {
            cfg: cfg.clone(),
            local,
            global,
            head,
            out,
        })
    }

    fn local_width(&self) -> usize {
        *self.cfg.local_widths.last().unwrap()
    }

    fn global_width(&self) -> usize {
        *self.cfg.global_widths.last().unwrap()
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng64) {
        for b in self.local.iter().chain(&self.global).chain(&self.head) {
            b.register(store, rng);
        }
        self.out.register(store, rng);
    }

    /// Fresh parameters for `cfg` under `prefix`, deterministic per seed.
    pub fn init_params<T: Real>(cfg: &NetConfig, prefix: &str, seed: u64) -> Result<ParamStore<T>> {
        let net = Self::new(cfg, prefix)?;
        let mut store = ParamStore::new();
        net.register(&mut store, &mut Rng64::new(seed));
        Ok(store)
    }

    /// `points` holds `n` rows of [`NetConfig::input_width`] values.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        points: &[T],
        n: usize,
        mode: Mode,
    ) -> Result<(Vec<T>, PointNetCache<T>)> {
        if n == 0 {
            return Err(Error::EmptyInput("point encoder needs at least one point".into()));
        }
        let width = self.cfg.input_width();
        if points.len() != n * width {
            return Err(Error::ShapeMismatch(format!(
                "point input: expected {n} x {width} values, got {}",
                points.len()
            )));
        }
        let order = canonical_order(points, width);
        let mut rank = vec![0u32; n];
        for (k, &i) in order.iter().enumerate() {
            rank[i as usize] = k as u32;
        }
        let bn_mode = match (mode, self.cfg.eval_stats) {
            (Mode::Eval, EvalStats::Running) => Mode::Eval,
            _ => Mode::Train,
        };
        let mut x = permute_rows(points, width, &order);
        let mut local = Vec::with_capacity(self.local.len());
        for b in &self.local {
            let (y, c) = b.forward(store, x, n, bn_mode)?;
            local.push(c);
            x = y;
        }
        let local_feat = x;
        let mut x = local_feat.clone();
        let mut global = Vec::with_capacity(self.global.len());
        for b in &self.global {
            let (y, c) = b.forward(store, x, n, bn_mode)?;
            global.push(c);
            x = y;
        }

        let g = self.global_width();
        let mut global_feature = x[..g].to_vec();
        let mut argmax = vec![order[0]; g];
        for (row, &src) in x.chunks_exact(g).zip(&order).skip(1) {
            for ch in 0..g {
                if row[ch] > global_feature[ch] || (row[ch] == global_feature[ch] && src < argmax[ch]) {
                    global_feature[ch] = row[ch];
                    argmax[ch] = src;
                }
            }
        }

        let (first, c) = self.head_entry(store, local_feat, &global_feature, n, bn_mode)?;
        let mut head = vec![c];
        let mut x = first;
        for b in &self.head[1..] {
            let (y, c) = b.forward(store, x, n, bn_mode)?;
            head.push(c);
            x = y;
        }
        let features = self.out.forward(store, &x, n)?;
        Ok((
            permute_rows(&features, self.cfg.out_channels, &rank),
            PointNetCache {
                points: n,
                mode,
                local,
                global,
                head,
                argmax,
                order,
                rank,
                global_feature,
            },
        ))
    }

    /// Columns `[..l]` and `[l..]` of the first head layer's weight.
    fn split_head_weight<T: Real>(&self, store: &ParamStore<T>) -> Result<(Vec<T>, Vec<T>)> {
        let (l, g) = (self.local_width(), self.global_width());
        let b = &self.head[0];
        let w = store.value_checked(&b.dense.weight_name(), b.dense.outputs * (l + g))?;
        let mut w_local = Vec::with_capacity(b.dense.outputs * l);
        let mut w_global = Vec::with_capacity(b.dense.outputs * g);
        for row in w.chunks_exact(l + g) {
            w_local.extend_from_slice(&row[..l]);
            w_global.extend_from_slice(&row[l..]);
        }
        Ok((w_local, w_global))
    }

    /// `relu(bn(local W_l^T) + W_g global)`; the cache input holds the local rows.
    fn head_entry<T: Real>(
        &self,
        store: &ParamStore<T>,
        local: Vec<T>,
        global: &[T],
        n: usize,
        bn_mode: Mode,
    ) -> Result<(Vec<T>, DenseBnReluCache<T>)> {
        let (l, g) = (self.local_width(), self.global_width());
        let b = &self.head[0];
        let h = b.dense.outputs;
        let (w_local, w_global) = self.split_head_weight(store)?;
        let mut z = vec![T::zero(); n * h];
        gemm(false, true, n, h, l, T::one(), &local, &w_local, T::zero(), &mut z);
        let mut shift = vec![T::zero(); h];
        gemm(false, true, 1, h, g, T::one(), global, &w_global, T::zero(), &mut shift);
        let (mut y, bn) = b.bn.forward(store, &z, n, bn_mode)?;
        for row in y.chunks_exact_mut(h) {
            for (v, &s) in row.iter_mut().zip(&shift) {
                *v += s;
            }
        }
        relu_inplace(&mut y);
        Ok((
            y.clone(),
            DenseBnReluCache {
                input: local,
                bn,
                output: y,
            },
        ))
    }

    /// Backward of [`Self::head_entry`]: gradients for the local rows and the
    /// global vector.
    fn head_entry_backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &DenseBnReluCache<T>,
        global: &[T],
        mut dy: Vec<T>,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let (l, g) = (self.local_width(), self.global_width());
        let b = &self.head[0];
        let (h, n) = (b.dense.outputs, cache.bn.rows);
        relu_backward_inplace(&cache.output, &mut dy);
        let mut d_shift = vec![T::zero(); h];
        for row in dy.chunks_exact(h) {
            for (acc, &v) in d_shift.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let dz = b.bn.backward(store, &cache.bn, &dy)?;
        let (w_local, w_global) = self.split_head_weight(store)?;
        let mut gw_local = vec![T::zero(); h * l];
        gemm(true, false, h, l, n, T::one(), &dz, &cache.input, T::zero(), &mut gw_local);
        let grad = &mut store.get_mut(&b.dense.weight_name())?.grad.data;
        for (o, row) in grad.chunks_exact_mut(l + g).enumerate() {
            for (acc, &v) in row[..l].iter_mut().zip(&gw_local[o * l..(o + 1) * l]) {
                *acc += v;
            }
            for (acc, &v) in row[l..].iter_mut().zip(global) {
                *acc += d_shift[o] * v;
            }
        }
        let mut d_local = vec![T::zero(); n * l];
        gemm(false, false, n, l, h, T::one(), &dz, &w_local, T::zero(), &mut d_local);
        let mut d_global = vec![T::zero(); g];
        gemm(false, false, 1, g, h, T::one(), &d_shift, &w_global, T::zero(), &mut d_global);
        Ok((d_local, d_global))
    }

    fn check_cache<T: Real>(&self, cache: &PointNetCache<T>) -> Result<()> {
        // The first head layer caches only the local part of its input.
        let fits = |blocks: &[DenseBnRelu], caches: &[DenseBnReluCache<T>], first_input: Option<usize>| {
            blocks.len() == caches.len()
                && blocks.iter().zip(caches).enumerate().all(|(i, (b, c))| {
                    let inputs = if i == 0 { first_input.unwrap_or(b.dense.inputs) } else { b.dense.inputs };
                    c.input.len() == cache.points * inputs && c.output.len() == cache.points * b.dense.outputs
                })
        };
        if !fits(&self.local, &cache.local, None)
            || !fits(&self.global, &cache.global, None)
            || !fits(&self.head, &cache.head, Some(self.local_width()))
            || cache.global_feature.len() != self.global_width()
            || cache.argmax.len() != self.global_width()
            || cache.argmax.iter().any(|&a| a as usize >= cache.points)
            || cache.order.len() != cache.points
            || cache.rank.len() != cache.points
        {
            return Err(Error::ShapeMismatch("forward cache does not match this network".into()));
        }
        Ok(())
    }

    /// Accumulates parameter gradients for `grad_features` (n x out) and
    /// returns the gradient with respect to the input rows.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &PointNetCache<T>,
        grad_features: &[T],
    ) -> Result<Vec<T>> {
        self.check_cache(cache)?;
        let n = cache.points;
        if grad_features.len() != n * self.cfg.out_channels {
            return Err(Error::ShapeMismatch(format!(
                "feature gradient: expected {n} x {} values, got {}",
                self.cfg.out_channels,
                grad_features.len()
            )));
        }
        let grad_features = permute_rows(grad_features, self.cfg.out_channels, &cache.order);
        let head_in = &cache.head.last().unwrap().output;
        let mut d = self
            .out
            .backward(store, head_in, n, &grad_features, true)?
            .expect("requested");
        for (b, c) in self.head.iter().zip(&cache.head).skip(1).rev() {
            d = b.backward(store, c, d, true)?.expect("requested");
        }
        let (d_local, d_pool) = self.head_entry_backward(store, &cache.head[0], &cache.global_feature, d)?;

        // The pooled gradient goes to the argmax rows.
        let g = self.global_width();
        let mut d = vec![T::zero(); n * g];
        for (ch, (&a, &v)) in cache.argmax.iter().zip(&d_pool).enumerate() {
            d[cache.rank[a as usize] as usize * g + ch] += v;
        }
        for (b, c) in self.global.iter().zip(&cache.global).rev() {
            d = b.backward(store, c, d, true)?.expect("requested");
        }
        for (acc, v) in d.iter_mut().zip(&d_local) {
            *acc += *v;
        }
        for (b, c) in self.local.iter().zip(&cache.local).rev() {
            d = b.backward(store, c, d, true)?.expect("requested");
        }
        Ok(permute_rows(&d, self.cfg.input_width(), &cache.rank))
    }

    /// Applies a train-mode pass to the running batch-norm statistics.
    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &PointNetCache<T>) -> Result<()> {
        self.check_cache(cache)?;
        if cache.mode != Mode::Train {
            return Ok(());
        }
        for (b, c) in self
            .local
            .iter()
            .zip(&cache.local)
            .chain(self.global.iter().zip(&cache.global))
            .chain(self.head.iter().zip(&cache.head))
        {
            b.commit(store, c)?;
        }
        Ok(())
    }
}

/// Stable lexicographic order of the rows of `values`.
fn canonical_order<T: Real>(values: &[T], width: usize) -> Vec<u32> {
    let rows: Vec<&[T]> = values.chunks_exact(width).collect();
    let mut order: Vec<u32> = (0..rows.len() as u32).collect();
    order.sort_by(|&a, &b| {
        rows[a as usize]
            .iter()
            .zip(rows[b as usize])
            .map(|(x, y)| x.as_f64().total_cmp(&y.as_f64()))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Row `k` of the result is row `index[k]` of `values`.
fn permute_rows<T: Real>(values: &[T], width: usize, index: &[u32]) -> Vec<T> {
    let mut out = Vec::with_capacity(values.len());
    for &i in index {
        out.extend_from_slice(&values[i as usize * width..(i as usize + 1) * width]);
    }
    out
}
