//! SGD training of the whole network, one view per step, plus evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use geofuse_core::geom::{frustum_select, project, to_camera_frame};
use geofuse_core::rng::Rng64;
use geofuse_core::sampling::{poisson_downsample, radius_context};
use geofuse_core::visibility::{visible_mask, VisibilityConfig};
use geofuse_core::SceneSample;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedTensor, VELOCITY_SUFFIX};
use crate::error::{Error, Result};
use crate::fusion::{argmax_labels, cross_entropy, ConfusionMatrix, MergeMode, Metrics};
use crate::layers::{Grid, Mode};
use crate::lpointnet::{EvalStats, NetConfig};
use crate::model::{MergeStage, Model, ModelConfig, ModelInput};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Stream separation for the epoch shuffles, so they do not replay the
/// initialization draws.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateSystem {
    Camera,
    /// World frame re-centered at the scene cloud centroid.
    World,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudScope {
    /// Only unoccluded frustum points reach the encoder.
    Visible,
    /// Every frustum point reaches the encoder; only visible ones are projected.
    Fov,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub halve_every: usize,
    pub seed: u64,
    pub coordinate_system: CoordinateSystem,
    pub cloud_scope: CloudScope,
    pub merge_stage: MergeStage,
    pub merge_mode: MergeMode,
    pub visibility_theta: f64,
    pub num_classes: usize,
    /// False trains the color-only baseline.
    pub use_geometry: bool,
    pub local_widths: Vec<usize>,
    pub global_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub use_rgb: bool,
    /// Encoder batch-norm statistics at evaluation time.
    pub encoder_eval_stats: EvalStats,
    /// Thins each scene cloud before anything else.
    pub poisson_radius: Option<f64>,
    /// With the fov scope, also feeds points within this distance of a
    /// visible point, inside the frustum or not.
    pub context_radius: Option<f64>,
    pub far_clip: Option<f64>,
    /// Writes measured seconds into the log; off keeps logs reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0001,
            epochs: 40,
            halve_every: 5,
            seed: 0,
            coordinate_system: CoordinateSystem::Camera,
            cloud_scope: CloudScope::Fov,
            merge_stage: MergeStage::Early,
            merge_mode: MergeMode::Local,
            visibility_theta: 2.0,
            num_classes: 5,
            use_geometry: true,
            local_widths: net.local_widths,
            global_widths: net.global_widths,
            head_widths: net.head_widths,
            use_rgb: false,
            encoder_eval_stats: net.eval_stats,
            poisson_radius: None,
            context_radius: None,
            far_clip: None,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            local_widths: self.local_widths.clone(),
            global_widths: self.global_widths.clone(),
            head_widths: self.head_widths.clone(),
            use_rgb: self.use_rgb,
            eval_stats: self.encoder_eval_stats,
            ..NetConfig::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            net: self.net_config(),
            num_classes: self.num_classes,
            merge_stage: self.merge_stage,
            merge_mode: self.merge_mode,
            use_geometry: self.use_geometry,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.epochs == 0 || self.halve_every == 0 {
            return bad("epochs and halve_every must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        for (name, r) in [("poisson_radius", self.poisson_radius), ("context_radius", self.context_radius)] {
            if matches!(r, Some(r) if !(r > 0.0 && r.is_finite())) {
                return bad(format!("{name} must be positive"));
            }
        }
        if matches!(self.far_clip, Some(f) if !(f > 0.0)) {
            return bad("far_clip must be positive".into());
        }
        VisibilityConfig::with_theta(self.visibility_theta).validate()?;
        self.model_config().validate()?;
        if self.use_geometry {
            self.net_config().validate_for_pipeline()?;
        }
        Ok(())
    }
}

/// `lr0 / 2^floor(epoch / halve_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.halve_every).min(1000) as i32;
    cfg.lr0 * 0.5f64.powi(halvings)
}

/// Momentum SGD with coupled weight decay:
/// `v = m v + (g + wd p)`, `p -= lr v`. Running statistics are left alone.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: T::of(momentum),
            weight_decay: T::of(weight_decay),
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter and zeroes all gradient slots.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        let lr = T::of(lr);
        for (name, p) in store.iter_mut() {
            if p.kind.trainable() {
                let v = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| vec![T::zero(); p.value.len()]);
                for ((w, g), vel) in p.value.data.iter_mut().zip(&p.grad.data).zip(v.iter_mut()) {
                    *vel = self.momentum * *vel + (*g + self.weight_decay * *w);
                    *w -= lr * *vel;
                }
            }
        }
        store.zero_grads();
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Momentum buffers named `<param>.velocity`, shaped like their params.
    pub fn velocity_tensors(&self, store: &ParamStore<T>) -> Vec<NamedTensor> {
        self.velocity
            .iter()
            .filter_map(|(name, v)| {
                let p = store.get(name).ok()?;
                Some(NamedTensor {
                    name: format!("{name}{VELOCITY_SUFFIX}"),
                    tensor: Tensor::from_vec(&p.value.shape, v.iter().map(|x| x.as_f64() as f32).collect()),
                })
            })
            .collect()
    }
}

/// A view turned into network input plus its labels.
#[derive(Clone, Debug)]
pub struct PreparedView {
    pub input: ModelInput<f32>,
    pub labels: Vec<u8>,
    pub frustum_points: usize,
    pub visible_points: usize,
}

/// Frustum selection, visibility, encoder cloud choice and coordinate frame
/// for one sample.
pub fn prepare_view(sample: &SceneSample, cfg: &TrainConfig) -> Result<PreparedView> {
    sample.validate(cfg.num_classes)?;
    let full = &sample.cloud;
    let base: Vec<usize> = match cfg.poisson_radius {
        Some(r) => poisson_downsample(full, r, cfg.seed ^ sample.scene_id as u64)?,
        None => (0..full.len()).collect(),
    };
    let world = full.select(&base);
    let mut rig = sample.rig.clone();
    if cfg.far_clip.is_some() {
        rig.far_clip = cfg.far_clip;
    }
    let cam = to_camera_frame(&world, &rig);
    let frustum = frustum_select(&cam, &rig);
    let vis = visible_mask(&cam.select(&frustum), &rig, &VisibilityConfig::with_theta(cfg.visibility_theta))?;
    let visible: Vec<usize> = frustum
        .iter()
        .zip(&vis.visible)
        .filter(|(_, &v)| v)
        .map(|(&i, _)| i)
        .collect();

    // Rows of `world` fed to the encoder, ascending.
    let rows: Vec<usize> = match cfg.cloud_scope {
        CloudScope::Visible => visible.clone(),
        CloudScope::Fov => match cfg.context_radius {
            Some(r) => {
                let mut ctx = radius_context(&world, &visible, r)?;
                ctx.extend_from_slice(&frustum);
                ctx.sort_unstable();
                ctx.dedup();
                ctx
            }
            None => frustum.clone(),
        },
    };
    let mut is_visible = vec![false; world.len()];
    for &i in &visible {
        is_visible[i] = true;
    }

    let centroid = full.centroid();
    let width = cfg.net_config().input_width();
    let mut points = Vec::with_capacity(rows.len() * width);
    let colors = match (&world.colors, cfg.use_rgb) {
        (Some(c), true) => Some(c),
        (None, true) => return Err(Error::InvalidConfig("use_rgb needs a colored point cloud".into())),
        _ => None,
    };
    for &i in &rows {
        let p = match cfg.coordinate_system {
            CoordinateSystem::Camera => cam.positions[i],
            CoordinateSystem::World => world.positions[i] - centroid,
        };
        points.extend([p.x as f32, p.y as f32, p.z as f32]);
        if let Some(c) = colors {
            points.extend_from_slice(&c[i]);
        }
    }
    let grid = Grid {
        height: sample.height(),
        width: sample.width(),
    };
    Ok(PreparedView {
        input: ModelInput {
            grid,
            rgb: sample.rgb.clone(),
            points,
            n_points: rows.len(),
            visible: rows.iter().map(|&i| is_visible[i]).collect(),
            projections: rows.iter().map(|&i| project(&rig, &cam.positions[i])).collect(),
        },
        labels: sample.labels.clone(),
        frustum_points: frustum.len(),
        visible_points: visible.len(),
    })
}

/// Forward, loss, backward, running-stat update and one optimizer step.
/// Returns the loss before the update.
pub fn train_step<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    sgd: &mut Sgd<T>,
    input: &ModelInput<T>,
    labels: &[u8],
    lr: f64,
) -> Result<f64> {
    let (logits, cache) = model.forward(store, input, Mode::Train)?;
    let ce = cross_entropy(&logits, labels, model.cfg.num_classes)?;
    model.backward(store, &cache, &ce.grad)?;
    model.commit(store, &cache)?;
    sgd.step(store, lr);
    Ok(ce.loss)
}

/// Train-mode loss without touching anything.
pub fn train_loss<T: Real>(model: &Model, store: &ParamStore<T>, input: &ModelInput<T>, labels: &[u8]) -> Result<f64> {
    let (logits, _) = model.forward(store, input, Mode::Train)?;
    Ok(cross_entropy(&logits, labels, model.cfg.num_classes)?.loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_miou,seconds";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_miou, r.seconds);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::InvalidConfig(format!("log header must be {LOG_HEADER}")));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::InvalidConfig(format!("log line {}: {line:?}", n + 2));
            if cols.len() != 5 {
                return Err(bad());
            }
            let f = |i: usize| cols[i].parse::<f64>().map_err(|_| bad());
            records.push(EpochRecord {
                epoch: cols[0].parse().map_err(|_| bad())?,
                lr: f(1)?,
                train_loss: f(2)?,
                val_miou: f(3)?,
                seconds: f(4)?,
            });
        }
        Ok(Self { records })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters and momentum buffers at the best validation epoch.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub last: Checkpoint,
    pub log: TrainLog,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    /// mIoU of each view on its own.
    pub per_image: Vec<f64>,
}

fn check_set(samples: &[SceneSample], what: &str) -> Result<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyInput(format!("{what} set is empty")))?;
    let size = (first.width(), first.height());
    if let Some(s) = samples.iter().find(|s| (s.width(), s.height()) != size) {
        return Err(Error::ShapeMismatch(format!(
            "{what} view {}/{} is {}x{}, expected {}x{}",
            s.scene_id,
            s.view_id,
            s.width(),
            s.height(),
            size.0,
            size.1
        )));
    }
    Ok(size)
}

pub fn prepare_set(samples: &[SceneSample], cfg: &TrainConfig) -> Result<Vec<PreparedView>> {
    samples.iter().map(|s| prepare_view(s, cfg)).collect()
}

/// Eval-mode predictions over prepared views.
pub fn evaluate_prepared(model: &Model, store: &ParamStore<f32>, views: &[PreparedView]) -> Result<EvalReport> {
    if views.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let classes = model.cfg.num_classes;
    let mut confusion = ConfusionMatrix::new(classes);
    let mut per_image = Vec::with_capacity(views.len());
    for v in views {
        let (logits, _) = model.forward(store, &v.input, Mode::Eval)?;
        let pred = argmax_labels(&logits, classes);
        let mut cm = ConfusionMatrix::new(classes);
        cm.add(&pred, &v.labels)?;
        per_image.push(cm.metrics().miou);
        confusion.merge(&cm);
    }
    Ok(EvalReport {
        metrics: confusion.metrics(),
        confusion,
        per_image,
    })
}

pub fn evaluate(checkpoint: &Checkpoint, cfg: &TrainConfig, dataset: &[SceneSample]) -> Result<EvalReport> {
    cfg.validate()?;
    check_set(dataset, "evaluation")?;
    let model = Model::new(&cfg.model_config())?;
    model.check_params(&checkpoint.params)?;
    let views = prepare_set(dataset, cfg)?;
    evaluate_prepared(&model, &checkpoint.params, &views)
}

pub fn train(cfg: &TrainConfig, train_set: &[SceneSample], val_set: &[SceneSample]) -> Result<TrainOutcome> {
    train_with_progress(cfg, train_set, val_set, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    cfg: &TrainConfig,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let size = check_set(train_set, "training")?;
    if check_set(val_set, "validation")? != size {
        return Err(Error::ShapeMismatch("training and validation views differ in size".into()));
    }
    let model = Model::new(&cfg.model_config())?;
    let train_views = prepare_set(train_set, cfg)?;
    let val_views = prepare_set(val_set, cfg)?;

    let mut store: ParamStore<f32> = model.init_params(cfg.seed);
    let mut sgd = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let mut rng = Rng64::new(cfg.seed ^ SHUFFLE_STREAM);
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64, Checkpoint)> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        let order = rng.permutation(train_views.len());
        let mut total = 0.0;
        for i in order {
            let v = &train_views[i];
            total += train_step(&model, &mut store, &mut sgd, &v.input, &v.labels, lr)?;
        }
        let val = evaluate_prepared(&model, &store, &val_views)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / train_views.len() as f64,
            val_miou: val.metrics.miou,
            seconds: if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        progress(&record);
        if best.as_ref().map_or(true, |(_, m, _)| record.val_miou > *m) {
            best = Some((
                epoch,
                record.val_miou,
                Checkpoint {
                    params: store.clone(),
                    velocity: sgd.velocity_tensors(&store),
                },
            ));
        }
        log.records.push(record);
    }
    let (best_epoch, best_miou, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_miou,
        last: Checkpoint {
            velocity: sgd.velocity_tensors(&store),
            params: store,
        },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert_eq!(lr_at(4, &cfg), 0.01);
        assert_eq!(lr_at(5, &cfg), 0.005);
        assert_eq!(lr_at(12, &cfg), 0.0025);
        assert_eq!(lr_at(39, &cfg), 7.8125e-5);
    }

    fn scalar_store(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p.weight", ParamKind::Weight, Tensor::from_vec(&[1], vec![p]));
        s.get_mut("p.weight").unwrap().grad.data[0] = g;
        s
    }

    #[test]
    fn vanilla_step() {
        let mut s = scalar_store(1.0, 1.0);
        Sgd::new(0.0, 0.0).step(&mut s, 0.1);
        assert!((s.value("p.weight").unwrap()[0] - 0.9).abs() < 1e-15);
        assert_eq!(s.grad("p.weight").unwrap()[0], 0.0);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = scalar_store(0.7, 0.0);
        Sgd::new(0.9, 0.0).step(&mut s, 0.1);
        assert_eq!(s.value("p.weight").unwrap()[0], 0.7);
    }

    #[test]
    fn two_momentum_steps() {
        let mut s = scalar_store(0.0, 1.0);
        let mut sgd = Sgd::new(0.9, 0.0);
        sgd.step(&mut s, 0.1);
        s.get_mut("p.weight").unwrap().grad.data[0] = 1.0;
        sgd.step(&mut s, 0.1);
        assert!((s.value("p.weight").unwrap()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn running_stats_are_not_optimized() {
        let mut s = ParamStore::<f64>::new();
        s.insert("bn.running_mean", ParamKind::RunningMean, Tensor::from_vec(&[1], vec![0.5]));
        s.get_mut("bn.running_mean").unwrap().grad.data[0] = 3.0;
        Sgd::new(0.9, 0.1).step(&mut s, 0.1);
        assert_eq!(s.value("bn.running_mean").unwrap()[0], 0.5);
    }

    #[test]
    fn log_roundtrip() {
        let log = TrainLog {
            records: vec![EpochRecord {
                epoch: 0,
                lr: 0.01,
                train_loss: 1.25,
                val_miou: 0.5,
                seconds: 0.0,
            }],
        };
        let csv = log.to_csv();
        assert_eq!(csv, "epoch,lr,train_loss,val_miou,seconds\n0,0.01,1.25,0.5,0\n");
        assert_eq!(TrainLog::from_csv(&csv).unwrap(), log);
        assert!(TrainLog::from_csv("epoch,lr\n").is_err());
    }

    #[test]
    fn config_defaults_and_toml_names() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.epochs, cfg.halve_every), (0.01, 0.9, 0.0001, 40, 5));
        cfg.validate().unwrap();
        let bad = TrainConfig {
            halve_every: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
