//! The full per-view network: point encoder, scatter, merge, segmentation
//! head. Parameters are grouped under `p3d/`, `merge/` and `seg/`.

use std::hash::Hasher;

use geofuse_core::geom::PixelProjection;
use geofuse_core::rng::Rng64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    argmax_labels, scatter_backward, scatter_features, MergeCache, MergeMode, PixelMerge, SegHead, SparseFeatureMap,
    TrunkCache,
};
use crate::layers::{Grid, Mode, Pattern};
use crate::lpointnet::{LPointNet, NetConfig, PointNetCache};
use crate::params::ParamStore;
use crate::tensor::Real;

pub const POINT_PREFIX: &str = "p3d/";
pub const MERGE_PREFIX: &str = "merge/";
pub const SEG_PREFIX: &str = "seg/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStage {
    /// Point features join the color image before the segmentation head.
    Early,
    /// Point features join the decoder output before the classifier.
    Late,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub net: NetConfig,
    pub num_classes: usize,
    pub merge_stage: MergeStage,
    pub merge_mode: MergeMode,
    /// False gives the color-only baseline: no point encoder, every pixel on
    /// the color path.
    pub use_geometry: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::InvalidConfig(format!("num_classes must be in 1..=255, got {}", self.num_classes)));
        }
        if self.use_geometry {
            self.net.validate()?;
        }
        Ok(())
    }
}

/// Everything the network sees for one view.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    pub grid: Grid,
    /// `pixels x 3`.
    pub rgb: Vec<T>,
    /// Encoder input rows, `points x net.input_width()`.
    pub points: Vec<T>,
    pub n_points: usize,
    /// Which encoder rows may be written into the feature map.
    pub visible: Vec<bool>,
    pub projections: Vec<PixelProjection>,
}

impl<T: Real> ModelInput<T> {
    pub fn cast<U: Real>(&self) -> ModelInput<U> {
        ModelInput {
            grid: self.grid,
            rgb: self.rgb.iter().map(|v| U::of(v.as_f64())).collect(),
            points: self.points.iter().map(|v| U::of(v.as_f64())).collect(),
            n_points: self.n_points,
            visible: self.visible.clone(),
            projections: self.projections.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pointnet: Option<LPointNet>,
    input_merge: PixelMerge,
    late_merge: Option<PixelMerge>,
    pub seg: SegHead,
}

#[derive(Clone, Debug)]
struct PointPart<T> {
    cache: PointNetCache<T>,
    fmap: SparseFeatureMap<T>,
}

#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    point: Option<PointPart<T>>,
    merge: MergeCache<T>,
    trunk: TrunkCache<T>,
    late: Option<MergeCache<T>>,
    classifier_input: Vec<T>,
}

impl<T: Real> ModelCache<T> {
    pub fn feature_map(&self) -> Option<&SparseFeatureMap<T>> {
        self.point.as_ref().map(|p| &p.fmap)
    }

    pub fn merge_output(&self) -> &[T] {
        &self.merge.output
    }

    pub fn point_cache(&self) -> Option<&PointNetCache<T>> {
        self.point.as_ref().map(|p| &p.cache)
    }
}

impl<T: Real> Pattern for ModelCache<T> {
    fn feed_pattern(&self, h: &mut dyn Hasher) {
        if let Some(p) = &self.point {
            p.cache.feed_pattern(h);
        }
        self.merge.feed_pattern(h);
        self.trunk.feed_pattern(h);
        if let Some(l) = &self.late {
            l.feed_pattern(h);
        }
    }
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.net.out_channels;
        let (pointnet, input_merge, late_merge) = if !cfg.use_geometry {
            (None, PixelMerge::plain_only(MERGE_PREFIX, "rgb", 3), None)
        } else {
            let net = LPointNet::new(&cfg.net, POINT_PREFIX)?;
            match cfg.merge_stage {
                MergeStage::Early => (Some(net), PixelMerge::new(MERGE_PREFIX, "rgb", cfg.merge_mode, 3, f), None),
                MergeStage::Late => (
                    Some(net),
                    PixelMerge::plain_only(MERGE_PREFIX, "rgb", 3),
                    Some(PixelMerge::new(
                        &format!("{MERGE_PREFIX}late_"),
                        "plain",
                        cfg.merge_mode,
                        crate::fusion::TRUNK_CHANNELS,
                        f,
                    )),
                ),
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            pointnet,
            input_merge,
            late_merge,
            seg: SegHead::new(SEG_PREFIX, cfg.num_classes),
        })
    }

    /// Fresh parameters, deterministic per seed.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = Rng64::new(seed);
        let mut store = ParamStore::new();
        if let Some(p) = &self.pointnet {
            p.register(&mut store, &mut rng);
        }
        self.input_merge.register(&mut store, &mut rng);
        if let Some(m) = &self.late_merge {
            m.register(&mut store, &mut rng);
        }
        self.seg.register(&mut store, &mut rng);
        store
    }

    pub fn uses_points(&self) -> bool {
        self.pointnet.is_some()
    }

    fn check_input<T: Real>(&self, input: &ModelInput<T>) -> Result<()> {
        SegHead::check_grid(input.grid)?;
        let pixels = input.grid.pixels();
        if input.rgb.len() != pixels * 3 {
            return Err(Error::ShapeMismatch(format!("expected {pixels} x 3 color values, got {}", input.rgb.len())));
        }
        let n = input.n_points;
        let width = self.cfg.net.input_width();
        if self.pointnet.is_some()
            && (input.points.len() != n * width || input.visible.len() != n || input.projections.len() != n)
        {
            return Err(Error::ShapeMismatch(format!(
                "{n} points need {} input values, {n} mask entries and {n} projections",
                n * width
            )));
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        input: &ModelInput<T>,
        mode: Mode,
    ) -> Result<(Vec<T>, ModelCache<T>)> {
        self.check_input(input)?;
        let grid = input.grid;
        let point = match &self.pointnet {
            Some(net) if input.n_points > 0 => {
                let (features, cache) = net.forward(store, &input.points, input.n_points, mode)?;
                let fmap = scatter_features(&features, self.cfg.net.out_channels, &input.visible, &input.projections, grid)?;
                Some(PointPart { cache, fmap })
            }
            _ => None,
        };
        let fmap = point.as_ref().map(|p| &p.fmap);
        let early_map = if self.late_merge.is_none() { fmap } else { None };
        let (x, merge) = self.input_merge.forward(store, &input.rgb, early_map, grid, mode)?;
        let (trunk_out, trunk) = self.seg.trunk_forward(store, &x, grid, mode)?;
        let (classifier_input, late) = match &self.late_merge {
            Some(m) => {
                let (z, c) = m.forward(store, &trunk_out, fmap, grid, mode)?;
                (z, Some(c))
            }
            None => (trunk_out, None),
        };
        let logits = self.seg.classifier.forward(store, &classifier_input, grid.pixels())?;
        Ok((
            logits,
            ModelCache {
                point,
                merge,
                trunk,
                late,
                classifier_input,
            },
        ))
    }

    /// Accumulates every parameter gradient; returns the gradient with respect
    /// to the encoder input rows when the point encoder ran.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ModelCache<T>,
        d_logits: &[T],
    ) -> Result<Option<Vec<T>>> {
        let pixels = cache.trunk.grid.pixels();
        let mut d = self
            .seg
            .classifier
            .backward(store, &cache.classifier_input, pixels, d_logits, true)?
            .expect("requested");
        let mut d_fmap = None;
        if let (Some(m), Some(c)) = (&self.late_merge, &cache.late) {
            let g = m.backward(store, c, d, true)?;
            d = g.side.expect("requested");
            d_fmap = Some(g.features);
        }
        let d_x = self.seg.trunk_backward(store, &cache.trunk, d, true)?.expect("requested");
        let g = self.input_merge.backward(store, &cache.merge, d_x, false)?;
        if self.late_merge.is_none() {
            d_fmap = Some(g.features);
        }
        match (&self.pointnet, &cache.point, d_fmap) {
            (Some(net), Some(p), Some(d_fmap)) => {
                let d_features = scatter_backward(&p.fmap, &d_fmap, p.cache.points);
                Ok(Some(net.backward(store, &p.cache, &d_features)?))
            }
            _ => Ok(None),
        }
    }

    /// Folds a train-mode pass into the running batch-norm statistics.
    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &ModelCache<T>) -> Result<()> {
        if let (Some(net), Some(p)) = (&self.pointnet, &cache.point) {
            net.commit(store, &p.cache)?;
        }
        self.input_merge.commit(store, &cache.merge)?;
        self.seg.commit(store, &cache.trunk)?;
        if let (Some(m), Some(c)) = (&self.late_merge, &cache.late) {
            m.commit(store, c)?;
        }
        Ok(())
    }

    /// Eval-mode labels.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, input: &ModelInput<T>) -> Result<Vec<u8>> {
        let (logits, _) = self.forward(store, input, Mode::Eval)?;
        Ok(argmax_labels(&logits, self.cfg.num_classes))
    }

    /// Eval-mode sparse feature map, `None` without points.
    pub fn feature_map<T: Real>(&self, store: &ParamStore<T>, input: &ModelInput<T>) -> Result<Option<SparseFeatureMap<T>>> {
        self.check_input(input)?;
        match &self.pointnet {
            Some(net) if input.n_points > 0 => {
                let (features, _) = net.forward(store, &input.points, input.n_points, Mode::Eval)?;
                Ok(Some(scatter_features(
                    &features,
                    self.cfg.net.out_channels,
                    &input.visible,
                    &input.projections,
                    input.grid,
                )?))
            }
            _ => Ok(None),
        }
    }

    /// Checks that `store` holds exactly this architecture's tensors.
    pub fn check_params<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let reference: ParamStore<T> = self.init_params(0);
        for (name, p) in reference.iter() {
            let q = store.get(name)?;
            if q.value.shape != p.value.shape {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: architecture expects {:?}, found {:?}",
                    p.value.shape, q.value.shape
                )));
            }
        }
        if let Some(extra) = store.names().find(|n| !reference.contains(n)) {
            return Err(Error::InvalidParams(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}
