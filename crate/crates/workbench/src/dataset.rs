//! On-disk dataset layout:
//!
//! ```text
//! <root>/spec.toml
//! <root>/{train,val}/scene_0000/cloud.ply
//! <root>/{train,val}/scene_0000/000.rgb.png
//! <root>/{train,val}/scene_0000/000.labels.png
//! <root>/{train,val}/scene_0000/000.camera.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use geofuse_core::io::{
    read_camera, read_labels_png, read_ply, read_rgb_png, write_camera, write_labels_png, write_ply, write_rgb_png,
    PlyFormat,
};
use geofuse_core::SceneSample;

use crate::error::{Result, WorkbenchError};
use crate::scene::{gen_scene, scene_ids, SceneSpec};

pub const SPEC_FILE: &str = "spec.toml";
pub const CLOUD_FILE: &str = "cloud.ply";
pub const SPLITS: [&str; 2] = ["train", "val"];

pub fn scene_dir_name(id: u32) -> String {
    format!("scene_{id:04}")
}

pub fn view_stem(view: u32) -> String {
    format!("{view:03}")
}

/// Paths of one view's files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewPaths {
    pub scene_dir: PathBuf,
    pub scene_id: u32,
    pub view_id: u32,
}

impl ViewPaths {
    fn file(&self, suffix: &str) -> PathBuf {
        self.scene_dir.join(format!("{}.{suffix}", view_stem(self.view_id)))
    }

    pub fn rgb(&self) -> PathBuf {
        self.file("rgb.png")
    }

    pub fn labels(&self) -> PathBuf {
        self.file("labels.png")
    }

    pub fn camera(&self) -> PathBuf {
        self.file("camera.json")
    }

    pub fn cloud(&self) -> PathBuf {
        self.scene_dir.join(CLOUD_FILE)
    }

    /// Accepts a view stem (`.../scene_0003/001`) or any of its files.
    pub fn parse(path: &Path) -> Result<Self> {
        let bad = || WorkbenchError::Data(format!("{}: not a view path like scene_0000/000", path.display()));
        let name = path.file_name().and_then(|n| n.to_str()).ok_or_else(bad)?;
        let stem = ["rgb.png", "labels.png", "camera.json"]
            .iter()
            .find_map(|s| name.strip_suffix(&format!(".{s}")))
            .unwrap_or(name);
        let view_id = stem.parse().map_err(|_| bad())?;
        let scene_dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let scene_id = parse_scene_id(scene_dir).ok_or_else(bad)?;
        Ok(Self {
            scene_dir: scene_dir.to_path_buf(),
            scene_id,
            view_id,
        })
    }
}

fn parse_scene_id(dir: &Path) -> Option<u32> {
    let dir = if dir == Path::new(".") {
        std::env::current_dir().ok()?
    } else {
        dir.to_path_buf()
    };
    dir.file_name()?.to_str()?.strip_prefix("scene_")?.parse().ok()
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> WorkbenchError {
    WorkbenchError::Data(format!("{}: {e}", path.display()))
}

/// Generates every scene of `spec` and writes the layout under `root`.
pub fn write_dataset(spec: &SceneSpec, root: &Path) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(root)?;
    let text = toml::to_string(spec).map_err(|e| WorkbenchError::Spec(e.to_string()))?;
    fs::write(root.join(SPEC_FILE), text)?;
    let (train, val) = scene_ids(spec);
    for (split, ids) in SPLITS.iter().zip([train, val]) {
        for id in ids {
            let scene = gen_scene(spec, id)?;
            let dir = root.join(split).join(scene_dir_name(id));
            fs::create_dir_all(&dir)?;
            write_ply(&dir.join(CLOUD_FILE), &scene.cloud, PlyFormat::BinaryLittleEndian)?;
            for view in &scene.views {
                write_view(&dir, view)?;
            }
        }
    }
    Ok(())
}

/// Writes the three per-view files of `sample` into `scene_dir`.
pub fn write_view(scene_dir: &Path, sample: &SceneSample) -> Result<()> {
    let paths = ViewPaths {
        scene_dir: scene_dir.to_path_buf(),
        scene_id: sample.scene_id,
        view_id: sample.view_id,
    };
    let (w, h) = (sample.rig.width, sample.rig.height);
    write_rgb_png(&paths.rgb(), w, h, &sample.rgb)?;
    write_labels_png(&paths.labels(), w, h, &sample.labels)?;
    write_camera(&paths.camera(), &sample.rig)?;
    Ok(())
}

pub fn read_spec(path: &Path) -> Result<SceneSpec> {
    let text = fs::read_to_string(path).map_err(|e| WorkbenchError::Spec(format!("{}: {e}", path.display())))?;
    let spec: SceneSpec = toml::from_str(&text).map_err(|e| WorkbenchError::Spec(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

/// Reads one view, including its scene cloud.
pub fn read_view(paths: &ViewPaths) -> Result<SceneSample> {
    let cloud = read_ply(&paths.cloud()).map_err(|e| data_err(&paths.cloud(), e))?;
    read_view_with_cloud(paths, cloud)
}

fn read_view_with_cloud(paths: &ViewPaths, cloud: geofuse_core::PointCloud) -> Result<SceneSample> {
    let rig = read_camera(&paths.camera()).map_err(|e| data_err(&paths.camera(), e))?;
    let (w, h, rgb) = read_rgb_png(&paths.rgb()).map_err(|e| data_err(&paths.rgb(), e))?;
    let (lw, lh, labels) = read_labels_png(&paths.labels()).map_err(|e| data_err(&paths.labels(), e))?;
    if (w, h) != (rig.width, rig.height) || (lw, lh) != (w, h) {
        return Err(data_err(
            &paths.rgb(),
            format!("image {w}x{h}, labels {lw}x{lh} and camera {}x{} disagree", rig.width, rig.height),
        ));
    }
    Ok(SceneSample {
        rgb,
        labels,
        cloud,
        rig,
        scene_id: paths.scene_id,
        view_id: paths.view_id,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| data_err(dir, e))? {
        out.push(entry.map_err(|e| data_err(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Every view of every scene directory under `split_dir`, in name order.
pub fn list_views(split_dir: &Path) -> Result<Vec<ViewPaths>> {
    let mut views = Vec::new();
    for dir in sorted_entries(split_dir)? {
        let Some(scene_id) = dir.is_dir().then(|| parse_scene_id(&dir)).flatten() else {
            continue;
        };
        for file in sorted_entries(&dir)? {
            let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(stem) = name.strip_suffix(".camera.json") {
                let view_id = stem.parse().map_err(|_| data_err(&file, "view names must be numeric"))?;
                views.push(ViewPaths {
                    scene_dir: dir.clone(),
                    scene_id,
                    view_id,
                });
            }
        }
    }
    Ok(views)
}

/// Loads a split, reading each scene cloud once.
pub fn read_split(split_dir: &Path) -> Result<Vec<SceneSample>> {
    let mut out: Vec<SceneSample> = Vec::new();
    for paths in list_views(split_dir)? {
        let cloud = match out.last() {
            Some(prev) if prev.scene_id == paths.scene_id => prev.cloud.clone(),
            _ => read_ply(&paths.cloud()).map_err(|e| data_err(&paths.cloud(), e))?,
        };
        out.push(read_view_with_cloud(&paths, cloud)?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
}

/// Reads both splits; a missing split directory reads as empty.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(data_err(root, "no such dataset directory"));
    }
    let split = |name: &str| {
        let dir = root.join(name);
        if dir.is_dir() {
            read_split(&dir)
        } else {
            Ok(Vec::new())
        }
    };
    Ok(Dataset {
        train: split("train")?,
        val: split("val")?,
    })
}
