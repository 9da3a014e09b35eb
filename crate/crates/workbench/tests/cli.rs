use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geofuse_core::io::read_rgb_png;
use geofuse_workbench::cli::read_indices;
use geofuse_workbench::{SceneSpec, WorkbenchError};

const SPEC: &str = r#"
seed = 9
train_scenes = 2
val_scenes = 1
points_per_scene = 400
image_width = 16
image_height = 16
"#;

fn geofuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geofuse")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = geofuse(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    geofuse(args).status.code().unwrap()
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    spec: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = root.join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let data = root.join("data");
    ok(&["gen", "--spec", s(&spec), "--out", s(&data)]);
    Fixture { _dir: dir, root, spec, data }
}

#[test]
fn gen_is_deterministic() {
    let f = fixture();
    let again = f.root.join("again");
    ok(&["gen", "--spec", s(&f.spec), "--out", s(&again)]);
    let a = snapshot(&f.data);
    assert_eq!(a, snapshot(&again));
    assert_eq!(a.keys().filter(|k| k.ends_with("cloud.ply")).count(), 3);
    assert!(a.contains_key(Path::new("val/scene_0002/000.labels.png")));
    let written: SceneSpec = toml::from_str(std::str::from_utf8(&a[Path::new("spec.toml")]).unwrap()).unwrap();
    assert_eq!(written.seed, 9);
}

#[test]
fn preprocess_writes_index_lists_deterministically() {
    let f = fixture();
    let before = snapshot(&f.data);
    let (a, b) = (f.root.join("pre_a"), f.root.join("pre_b"));
    let args = |out: &Path| {
        let out = s(out).to_string();
        vec!["preprocess".into(), "--data".into(), s(&f.data).into(), "--theta".into(), "1.5".into(), "--poisson-radius".into(), "0.1".into(), "--context-radius".into(), "0.3".into(), "--out".into(), out]
    };
    let table = ok(&args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    ok(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(snapshot(&a), snapshot(&b));
    assert_eq!(snapshot(&f.data), before);

    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "split\tscene\tview\tfrustum_points\tvisible_points\tcoverage_fraction");
    assert_eq!(lines.count(), 3);
    assert_eq!(fs::read_to_string(a.join("coverage.tsv")).unwrap(), table);

    let vis = read_indices(&a.join("train/scene_0001/000.visible.u32")).unwrap();
    let ctx = read_indices(&a.join("train/scene_0001/000.context.u32")).unwrap();
    assert!(!vis.is_empty());
    assert!(vis.windows(2).all(|w| w[0] < w[1]) && ctx.windows(2).all(|w| w[0] < w[1]));
    assert!(vis.iter().all(|i| ctx.binary_search(i).is_ok()));
    assert!(ctx.iter().all(|&i| i < 400));

    // Default destination lives under the data directory.
    ok(&["preprocess", "--data", s(&f.data)]);
    assert!(f.data.join("preprocessed/val/scene_0002/000.visible.u32").exists());
    assert!(!f.data.join("preprocessed/val/scene_0002/000.context.u32").exists());
}

#[test]
fn stats_coverage_is_non_increasing() {
    let f = fixture();
    let table = ok(&["stats", "--data", s(&f.data), "--thetas", "0,1,2,3,4,5"]);
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(table.lines().next().unwrap(), "theta_deg\tvisible_points\tcoverage_fraction");
    assert_eq!(rows.len(), 6);
    let cov: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    let pts: Vec<usize> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(cov.windows(2).all(|w| w[1] <= w[0]));
    assert!(pts.windows(2).all(|w| w[1] <= w[0]));
    assert!(cov[0] > 0.0);
}

#[test]
fn train_eval_and_export_roundtrip() {
    let f = fixture();
    let before = snapshot(&f.data);
    let cfg = f.root.join("train.toml");
    fs::write(&cfg, "epochs = 2\nseed = 3\n").unwrap();
    let (a, b) = (f.root.join("a/model.ckpt"), f.root.join("b/model.ckpt"));
    for ckpt in [&a, &b] {
        ok(&["train", "--data", s(&f.data), "--config", s(&cfg), "--out", s(ckpt), "--merge-mode", "padding"]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = fs::read_to_string(f.root.join("a/model.ckpt.log.csv")).unwrap();
    assert_eq!(log, fs::read_to_string(f.root.join("b/model.ckpt.log.csv")).unwrap());
    assert_eq!(log.lines().next().unwrap(), "epoch,lr,train_loss,val_miou,seconds");
    assert_eq!(log.lines().count(), 3);
    let side = fs::read_to_string(f.root.join("a/model.ckpt.config.toml")).unwrap();
    assert!(side.contains("merge_mode = \"padding\""));
    assert!(side.contains("epochs = 2"));

    let table = ok(&["eval", "--ckpt", s(&a), "--data", s(&f.data)]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "class\tiou");
    assert_eq!(lines[1].split('\t').next(), Some("floor"));
    let miou: f64 = lines[6].strip_prefix("miou\t").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    for l in &lines[1..6] {
        let v = l.split('\t').nth(1).unwrap();
        assert!(v == "nan" || (0.0..=1.0).contains(&v.parse::<f64>().unwrap()));
    }
    assert_eq!(ok(&["eval", "--ckpt", s(&a), "--data", s(&f.data)]), table);
    ok(&["eval", "--ckpt", s(&a), "--data", s(&f.data), "--split", "train"]);

    let png = f.root.join("pca/view.png");
    ok(&["export-features", "--ckpt", s(&a), "--view", s(&f.data.join("val/scene_0002/000.rgb.png")), "--out", s(&png)]);
    let (w, h, rgb) = read_rgb_png(&png).unwrap();
    assert_eq!((w, h), (16, 16));
    assert!(rgb.iter().any(|&v| v > 0.0));

    assert_eq!(snapshot(&f.data), before);
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    let max = |key: &str| -> f64 {
        out.lines().find_map(|l| l.strip_prefix(key)).unwrap().trim().parse().unwrap()
    };
    assert!(max("max_rel_f32\t") < 1e-4);
    assert!(max("max_rel_f64\t") < 1e-6);
}

#[test]
fn exit_codes_follow_error_kind() {
    let f = fixture();
    let d = s(&f.data);
    // Usage errors.
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["gen", "--spec", s(&f.spec)]), 2);
    assert_eq!(code(&["stats", "--data", d, "--thetas", "x"]), 2);
    assert_eq!(code(&["train", "--data", d, "--out", "/dev/null/x", "--merge-stage", "middle"]), 2);
    assert_eq!(code(&["train", "--data", d, "--out", "/dev/null/x", "--epochs", "0"]), 2);
    assert_eq!(code(&["preprocess", "--data", d, "--theta", "-1"]), 2);
    let bad_spec = f.root.join("bad.toml");
    fs::write(&bad_spec, "image_width = 20\n").unwrap();
    assert_eq!(code(&["gen", "--spec", s(&bad_spec), "--out", s(&f.root.join("x"))]), 2);
    fs::write(&bad_spec, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&["gen", "--spec", s(&bad_spec), "--out", s(&f.root.join("x"))]), 2);

    // Data errors.
    let missing = s(&f.root.join("missing")).to_string();
    assert_eq!(code(&["stats", "--data", &missing]), 3);
    assert_eq!(code(&["preprocess", "--data", &missing]), 3);
    assert_eq!(code(&["train", "--data", &missing, "--out", s(&f.root.join("m.ckpt"))]), 3);
    let junk = f.root.join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    fs::write(f.root.join("junk.ckpt.config.toml"), "").unwrap();
    assert_eq!(code(&["eval", "--ckpt", s(&junk), "--data", d]), 3);
    let view = f.data.join("train/scene_0000/000");
    let ply = f.data.join("train/scene_0000/cloud.ply");
    let bytes = fs::read(&ply).unwrap();
    fs::write(&ply, &bytes[..bytes.len() - 7]).unwrap();
    assert_eq!(code(&["export-features", "--ckpt", s(&junk), "--view", s(&view), "--out", s(&f.root.join("o.png"))]), 3);
    assert_eq!(code(&["stats", "--data", d]), 3);

    // A failed numerical check is its own code.
    assert_eq!(WorkbenchError::Check("gradient mismatch".into()).exit_code(), 4);
}
