//! End-to-end gradient check against central finite differences.
//!
//! The pipeline (point encoder, scatter, merge, segmentation head, cross
//! entropy) runs on a small random view. Reference derivatives come from
//! central differences in f64 evaluated at the f32 parameters widened to
//! f64; both the f32 and the f64 analytic gradients are compared against
//! them with `|analytic - fd| / max(1, |fd|)`.
//!
//! A coordinate is skipped when the perturbation crosses a kink (a ReLU sign
//! or pooling winner changes between the base point and either probe), since
//! the difference quotient is then not a derivative of either piece.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeSet;
use std::hash::Hasher;
use std::time::Instant;

use geofuse_core::geom::{project, CameraRig, PointCloud};
use geofuse_core::rng::Rng64;
use geofuse_core::visibility::{visible_mask, VisibilityConfig};
use geofuse_core::IGNORE_LABEL;
use nalgebra::{Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::fusion::{cross_entropy, MergeMode};
use crate::layers::{Grid, Mode, Pattern};
use crate::lpointnet::NetConfig;
use crate::model::{MergeStage, Model, ModelConfig, ModelInput};
use crate::params::ParamStore;
use crate::tensor::Real;

pub const F32_TOLERANCE: f64 = 1e-4;
pub const F64_TOLERANCE: f64 = 1e-6;
/// Name used in reports for the encoder input coordinates.
pub const POINTS_TENSOR: &str = "input/points";

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub points: usize,
    pub grid: Grid,
    pub classes: usize,
    pub net: NetConfig,
    pub merge_stage: MergeStage,
    pub merge_mode: MergeMode,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub coords_per_tensor: usize,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            points: 16,
            grid: Grid { height: 8, width: 8 },
            classes: 5,
            net: NetConfig::default(),
            merge_stage: MergeStage::Early,
            merge_mode: MergeMode::Local,
            coords_per_tensor: 12,
            step: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_f32: f64,
    pub max_rel_f64: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorReport>,
    pub max_rel_f32: f64,
    pub max_rel_f64: f64,
    pub checked: usize,
    pub skipped: usize,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_f32 < F32_TOLERANCE && self.max_rel_f64 < F64_TOLERANCE
    }
}

/// A random view whose points all fall inside an identity-pose camera.
pub fn synthetic_view(cfg: &GradcheckConfig) -> Result<(ModelInput<f32>, Vec<u8>)> {
    let mut rng = Rng64::new(cfg.seed);
    let (w, h) = (cfg.grid.width as f64, cfg.grid.height as f64);
    let f = w;
    let rig = CameraRig::new(f, f, w / 2.0, h / 2.0, cfg.grid.width as u32, cfg.grid.height as u32, Matrix4::identity(), 0.05)?;
    let positions: Vec<Vector3<f64>> = (0..cfg.points)
        .map(|_| {
            let (u, v, z) = (rng.range(0.0, w), rng.range(0.0, h), rng.range(1.0, 3.0));
            Vector3::new((u - rig.cx) * z / f, (v - rig.cy) * z / f, z)
        })
        .collect();
    let cloud = PointCloud::new(positions);
    let vis = visible_mask(&cloud, &rig, &VisibilityConfig::default())?;
    let projections = cloud.positions.iter().map(|p| project(&rig, p)).collect();
    let mut points = Vec::with_capacity(cfg.points * cfg.net.input_width());
    for p in &cloud.positions {
        points.extend([p.x as f32, p.y as f32, p.z as f32]);
        if cfg.net.use_rgb {
            points.extend([rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32]);
        }
    }
    let rgb = (0..cfg.grid.pixels() * 3).map(|_| rng.uniform() as f32).collect();
    let labels = (0..cfg.grid.pixels())
        .map(|_| {
            let c = rng.below(cfg.classes as u64 + 1) as u8;
            if c as usize == cfg.classes {
                IGNORE_LABEL
            } else {
                c
            }
        })
        .collect();
    Ok((
        ModelInput {
            grid: cfg.grid,
            rgb,
            points,
            n_points: cfg.points,
            visible: vis.visible,
            projections,
        },
        labels,
    ))
}

fn evaluate<T: Real>(model: &Model, store: &ParamStore<T>, input: &ModelInput<T>, labels: &[u8]) -> Result<(f64, u64)> {
    let (logits, cache) = model.forward(store, input, Mode::Train)?;
    let ce = cross_entropy(&logits, labels, model.cfg.num_classes)?;
    let mut h = DefaultHasher::new();
    cache.feed_pattern(&mut h);
    Ok((ce.loss, h.finish()))
}

/// Analytic parameter gradients, input gradient and base pattern.
fn analytic<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    input: &ModelInput<T>,
    labels: &[u8],
) -> Result<(Vec<T>, u64)> {
    store.zero_grads();
    let (logits, cache) = model.forward(store, input, Mode::Train)?;
    let ce = cross_entropy(&logits, labels, model.cfg.num_classes)?;
    let d_points = model.backward(store, &cache, &ce.grad)?.unwrap_or_default();
    let mut h = DefaultHasher::new();
    cache.feed_pattern(&mut h);
    Ok((d_points, h.finish()))
}

fn sample_coords(rng: &mut Rng64, len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut set = BTreeSet::new();
    while set.len() < count {
        set.insert(rng.below(len as u64) as usize);
    }
    set.into_iter().collect()
}

fn rel(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / fd.abs().max(1.0)
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let model = Model::new(&ModelConfig {
        net: cfg.net.clone(),
        num_classes: cfg.classes,
        merge_stage: cfg.merge_stage,
        merge_mode: cfg.merge_mode,
        use_geometry: true,
    })?;
    let (input32, labels) = synthetic_view(cfg)?;
    let mut store32: ParamStore<f32> = model.init_params(cfg.seed);
    let mut store64: ParamStore<f64> = store32.cast();
    let mut input64: ModelInput<f64> = input32.cast();

    let (dp32, pattern32) = analytic(&model, &mut store32, &input32, &labels)?;
    let (dp64, pattern64) = analytic(&model, &mut store64, &input64, &labels)?;
    if pattern32 != pattern64 {
        return Err(Error::InvalidConfig(
            "f32 and f64 passes sit on different sides of a kink at the base point; choose another seed".into(),
        ));
    }
    let grads64 = store64.clone();
    let mut rng = Rng64::new(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let h = cfg.step;
    let mut reports = Vec::new();

    let names: Vec<String> = store64
        .iter()
        .filter(|(_, p)| p.kind.trainable())
        .map(|(n, _)| n.clone())
        .collect();
    for name in names.iter().map(String::as_str).chain([POINTS_TENSOR]) {
        let is_points = name == POINTS_TENSOR;
        let len = if is_points { input64.points.len() } else { store64.value(name)?.len() };
        let mut report = TensorReport {
            name: name.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_f32: 0.0,
            max_rel_f64: 0.0,
        };
        for j in sample_coords(&mut rng, len, cfg.coords_per_tensor) {
            let mut probe = |delta: f64| -> Result<(f64, u64)> {
                if is_points {
                    let orig = input64.points[j];
                    input64.points[j] = orig + delta;
                    let r = evaluate(&model, &store64, &input64, &labels);
                    input64.points[j] = orig;
                    r
                } else {
                    let orig = store64.value(name)?[j];
                    store64.get_mut(name)?.value.data[j] = orig + delta;
                    let r = evaluate(&model, &store64, &input64, &labels);
                    store64.get_mut(name)?.value.data[j] = orig;
                    r
                }
            };
            let (lp, hp) = probe(h)?;
            let (lm, hm) = probe(-h)?;
            if hp != pattern64 || hm != pattern64 {
                report.skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let (a32, a64) = if is_points {
                (dp32[j] as f64, dp64[j])
            } else {
                (store32.grad(name)?[j] as f64, grads64.grad(name)?[j])
            };
            report.checked += 1;
            report.max_rel_f32 = report.max_rel_f32.max(rel(a32, fd));
            report.max_rel_f64 = report.max_rel_f64.max(rel(a64, fd));
        }
        reports.push(report);
    }
    Ok(GradcheckReport {
        max_rel_f32: reports.iter().map(|r| r.max_rel_f32).fold(0.0, f64::max),
        max_rel_f64: reports.iter().map(|r| r.max_rel_f64).fold(0.0, f64::max),
        checked: reports.iter().map(|r| r.checked).sum(),
        skipped: reports.iter().map(|r| r.skipped).sum(),
        tensors: reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}
