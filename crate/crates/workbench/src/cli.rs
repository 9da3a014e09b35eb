//! The `geofuse` command line. Every command reads its inputs, writes new
//! files or stdout, and never touches the input files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use geofuse_core::geom::{frustum_select, to_camera_frame};
use geofuse_core::io::write_rgb_png;
use geofuse_core::sampling::{poisson_downsample, radius_context};
use geofuse_core::visibility::{coverage_sweep, visible_mask, VisibilityConfig};
use geofuse_core::SceneSample;
use geofuse_nn::checkpoint::Checkpoint;
use geofuse_nn::gradcheck::{self, GradcheckConfig, F32_TOLERANCE, F64_TOLERANCE};
use geofuse_nn::trainer::{evaluate, prepare_view, train_with_progress, TrainConfig};
use geofuse_nn::Model;

use crate::config::{log_path, parse_choice, read_train_config, sidecar_config_path, write_train_config};
use crate::dataset::{list_views, read_dataset, read_spec, read_view, scene_dir_name, view_stem, write_dataset, ViewPaths, SPLITS};
use crate::error::{Result, WorkbenchError};
use crate::pca::export_feature_pca;
use crate::scene::CLASS_NAMES;

#[derive(Debug, Parser)]
#[command(name = "geofuse", version, about = "2D segmentation with projected point-cloud features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-view visible (and context) point index lists.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        theta: f64,
        #[arg(long)]
        poisson_radius: Option<f64>,
        #[arg(long)]
        context_radius: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `<data>/preprocessed`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Point-pixel coverage for a list of visibility thresholds.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
        thetas: Vec<f64>,
    },
    /// Train and write the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Per-class IoU and mIoU of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the config saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// PCA false-color image of one view's projected features.
    ExportFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        view: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// End-to-end finite-difference gradient check.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Command-line overrides of config file values.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub halve_every: Option<usize>,
    /// camera or world
    #[arg(long)]
    pub coordinate_system: Option<String>,
    /// visible or fov
    #[arg(long)]
    pub cloud_scope: Option<String>,
    /// early or late
    #[arg(long)]
    pub merge_stage: Option<String>,
    /// local or padding
    #[arg(long)]
    pub merge_mode: Option<String>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub poisson_radius: Option<f64>,
    #[arg(long)]
    pub context_radius: Option<f64>,
    /// Train the color-only baseline.
    #[arg(long)]
    pub baseline: bool,
    /// Record measured epoch times in the log.
    #[arg(long)]
    pub wall_time: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr0 {
            cfg.lr0 = v;
        }
        if let Some(v) = self.halve_every {
            cfg.halve_every = v;
        }
        if let Some(v) = &self.coordinate_system {
            cfg.coordinate_system = parse_choice(v)?;
        }
        if let Some(v) = &self.cloud_scope {
            cfg.cloud_scope = parse_choice(v)?;
        }
        if let Some(v) = &self.merge_stage {
            cfg.merge_stage = parse_choice(v)?;
        }
        if let Some(v) = &self.merge_mode {
            cfg.merge_mode = parse_choice(v)?;
        }
        if let Some(v) = self.theta {
            cfg.visibility_theta = v;
        }
        if self.poisson_radius.is_some() {
            cfg.poisson_radius = self.poisson_radius;
        }
        if self.context_radius.is_some() {
            cfg.context_radius = self.context_radius;
        }
        if self.baseline {
            cfg.use_geometry = false;
        }
        if self.wall_time {
            cfg.record_wall_time = true;
        }
        Ok(())
    }
}

/// Runs one command, writing tables to `out` and progress to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen { spec, out: dir } => {
            let spec = read_spec(&spec)?;
            write_dataset(&spec, &dir)?;
            writeln!(err, "wrote {} scenes to {}", spec.total_scenes(), dir.display())?;
            Ok(())
        }
        Command::Preprocess {
            data,
            theta,
            poisson_radius,
            context_radius,
            seed,
            out: dest,
        } => {
            let dest = dest.unwrap_or_else(|| data.join("preprocessed"));
            let table = preprocess(&data, &dest, theta, poisson_radius, context_radius, seed)?;
            out.write_all(table.as_bytes())?;
            Ok(())
        }
        Command::Stats { data, thetas } => {
            out.write_all(stats(&data, &thetas)?.as_bytes())?;
            Ok(())
        }
        Command::Train {
            data,
            config,
            out: ckpt,
            overrides,
        } => {
            let mut cfg = match &config {
                Some(p) => read_train_config(p)?,
                None => TrainConfig::default(),
            };
            overrides.apply(&mut cfg)?;
            cfg.validate().map_err(|e| WorkbenchError::Config(e.to_string()))?;
            let ds = read_dataset(&data)?;
            let outcome = train_with_progress(&cfg, &ds.train, &ds.val, |r| {
                let _ = writeln!(
                    err,
                    "epoch {} lr {} loss {:.6} val_miou {:.6}",
                    r.epoch, r.lr, r.train_loss, r.val_miou
                );
            })?;
            if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            outcome.best.save(&ckpt)?;
            write_train_config(&sidecar_config_path(&ckpt), &cfg)?;
            fs::write(log_path(&ckpt), outcome.log.to_csv())?;
            writeln!(
                err,
                "best val mIoU {:.6} at epoch {}; wrote {}",
                outcome.best_miou,
                outcome.best_epoch,
                ckpt.display()
            )?;
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            config,
            split,
        } => {
            let cfg = checkpoint_config(&ckpt, config.as_deref())?;
            let checkpoint = load_checkpoint(&ckpt)?;
            if !SPLITS.contains(&split.as_str()) {
                return Err(WorkbenchError::Config(format!("split must be train or val, got {split:?}")));
            }
            let ds = read_dataset(&data)?;
            let samples = if split == "train" { ds.train } else { ds.val };
            let report = evaluate(&checkpoint, &cfg, &samples)?;
            out.write_all(eval_table(&report.metrics.per_class_iou, report.metrics.miou).as_bytes())?;
            Ok(())
        }
        Command::ExportFeatures {
            ckpt,
            view,
            out: png,
            config,
        } => {
            let cfg = checkpoint_config(&ckpt, config.as_deref())?;
            let checkpoint = load_checkpoint(&ckpt)?;
            let sample = read_view(&ViewPaths::parse(&view)?)?;
            export_features(&checkpoint, &cfg, &sample, &png)
        }
        Command::Gradcheck { seed } => {
            let report = gradcheck::run(&GradcheckConfig {
                seed,
                ..GradcheckConfig::default()
            })?;
            let mut table = String::from("tensor\tchecked\tskipped\tmax_rel_f32\tmax_rel_f64\n");
            for t in &report.tensors {
                let _ = writeln!(
                    table,
                    "{}\t{}\t{}\t{:e}\t{:e}",
                    t.name, t.checked, t.skipped, t.max_rel_f32, t.max_rel_f64
                );
            }
            let _ = writeln!(
                table,
                "max_rel_f32\t{:e}\nmax_rel_f64\t{:e}\nseconds\t{:.1}",
                report.max_rel_f32, report.max_rel_f64, report.seconds
            );
            out.write_all(table.as_bytes())?;
            if report.passed() {
                Ok(())
            } else {
                Err(WorkbenchError::Check(format!(
                    "max relative error {:e} (f32, limit {F32_TOLERANCE:e}), {:e} (f64, limit {F64_TOLERANCE:e})",
                    report.max_rel_f32, report.max_rel_f64
                )))
            }
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| WorkbenchError::Data(format!("{}: {e}", path.display())))
}

fn checkpoint_config(ckpt: &Path, explicit: Option<&Path>) -> Result<TrainConfig> {
    match explicit {
        Some(p) => read_train_config(p),
        None => {
            let side = sidecar_config_path(ckpt);
            if side.exists() {
                read_train_config(&side)
            } else {
                Err(WorkbenchError::Config(format!(
                    "no {} next to the checkpoint; pass --config",
                    side.display()
                )))
            }
        }
    }
}

pub fn eval_table(per_class: &[Option<f64>], miou: f64) -> String {
    let mut s = String::from("class\tiou\n");
    for (c, iou) in per_class.iter().enumerate() {
        let name = CLASS_NAMES.get(c).map_or_else(|| c.to_string(), |n| n.to_string());
        match iou {
            Some(v) => writeln!(s, "{name}\t{v:.6}"),
            None => writeln!(s, "{name}\tnan"),
        }
        .unwrap();
    }
    writeln!(s, "miou\t{miou:.6}").unwrap();
    s
}

fn write_indices(path: &Path, indices: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(indices.len() * 4);
    for &i in indices {
        bytes.extend_from_slice(&(i as u32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a little-endian u32 index list.
pub fn read_indices(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(WorkbenchError::Data(format!("{}: length {} is not a multiple of 4", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

/// Visible points (and, with a context radius, the frustum plus context
/// points) of every view as indices into the scene's `cloud.ply`.
pub fn preprocess(
    data: &Path,
    dest: &Path,
    theta: f64,
    poisson_radius: Option<f64>,
    context_radius: Option<f64>,
    seed: u64,
) -> Result<String> {
    let vis_cfg = VisibilityConfig::with_theta(theta);
    vis_cfg.validate().map_err(|e| WorkbenchError::Config(e.to_string()))?;
    for r in [poisson_radius, context_radius].into_iter().flatten() {
        if !(r > 0.0 && r.is_finite()) {
            return Err(WorkbenchError::Config(format!("radii must be positive, got {r}")));
        }
    }
    let mut table = String::from("split\tscene\tview\tfrustum_points\tvisible_points\tcoverage_fraction\n");
    let mut any = false;
    for split in SPLITS {
        let split_dir = data.join(split);
        if !split_dir.is_dir() {
            continue;
        }
        for paths in list_views(&split_dir)? {
            any = true;
            let sample = read_view(&paths)?;
            let base: Vec<usize> = match poisson_radius {
                Some(r) => poisson_downsample(&sample.cloud, r, seed ^ sample.scene_id as u64)?,
                None => (0..sample.cloud.len()).collect(),
            };
            let world = sample.cloud.select(&base);
            let cam = to_camera_frame(&world, &sample.rig);
            let frustum = frustum_select(&cam, &sample.rig);
            let vis = visible_mask(&cam.select(&frustum), &sample.rig, &vis_cfg)?;
            let visible: Vec<usize> = frustum.iter().zip(&vis.visible).filter(|(_, &v)| v).map(|(&i, _)| i).collect();
            let dir = dest.join(split).join(scene_dir_name(paths.scene_id));
            fs::create_dir_all(&dir)?;
            let stem = view_stem(paths.view_id);
            let original = |rows: &[usize]| rows.iter().map(|&i| base[i]).collect::<Vec<_>>();
            write_indices(&dir.join(format!("{stem}.visible.u32")), &original(&visible))?;
            if let Some(r) = context_radius {
                let mut ctx = radius_context(&world, &visible, r)?;
                ctx.extend_from_slice(&frustum);
                ctx.sort_unstable();
                ctx.dedup();
                write_indices(&dir.join(format!("{stem}.context.u32")), &original(&ctx))?;
            }
            writeln!(
                table,
                "{split}\t{}\t{}\t{}\t{}\t{:.6}",
                paths.scene_id,
                paths.view_id,
                frustum.len(),
                visible.len(),
                vis.coverage
            )
            .unwrap();
        }
    }
    if !any {
        return Err(WorkbenchError::Data(format!("{}: no views found", data.display())));
    }
    fs::create_dir_all(dest)?;
    fs::write(dest.join("coverage.tsv"), &table)?;
    Ok(table)
}

/// Coverage sweep summed (points) and averaged (coverage) over all views.
pub fn stats(data: &Path, thetas: &[f64]) -> Result<String> {
    if thetas.is_empty() {
        return Err(WorkbenchError::Config("no thresholds given".into()));
    }
    let mut sorted = thetas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let ds = read_dataset(data)?;
    let views: Vec<&SceneSample> = ds.train.iter().chain(&ds.val).collect();
    if views.is_empty() {
        return Err(WorkbenchError::Data(format!("{}: no views found", data.display())));
    }
    let mut points = vec![0usize; sorted.len()];
    let mut coverage = vec![0.0f64; sorted.len()];
    for s in &views {
        let cam = to_camera_frame(&s.cloud, &s.rig);
        let fr = cam.select(&frustum_select(&cam, &s.rig));
        let rows = coverage_sweep(&fr, &s.rig, &sorted, VisibilityConfig::default().cell_size)
            .map_err(|e| WorkbenchError::Config(e.to_string()))?;
        for (k, r) in rows.iter().enumerate() {
            points[k] += r.visible_points;
            coverage[k] += r.coverage;
        }
    }
    let mut table = String::from("theta_deg\tvisible_points\tcoverage_fraction\n");
    for (k, t) in sorted.iter().enumerate() {
        writeln!(table, "{t}\t{}\t{:.6}", points[k], coverage[k] / views.len() as f64).unwrap();
    }
    Ok(table)
}

pub fn export_features(checkpoint: &Checkpoint, cfg: &TrainConfig, sample: &SceneSample, png: &Path) -> Result<()> {
    let model = Model::new(&cfg.model_config())?;
    model.check_params(&checkpoint.params)?;
    let view = prepare_view(sample, cfg)?;
    let fmap = model
        .feature_map(&checkpoint.params, &view.input)?
        .ok_or_else(|| WorkbenchError::Data("this view has no projected features".into()))?;
    let image = export_feature_pca(&fmap)?;
    if let Some(parent) = png.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_rgb_png(png, image.width as u32, image.height as u32, &image.rgb)?;
    Ok(())
}
