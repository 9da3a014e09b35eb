use geofuse_core::geom::{CameraRig, PointCloud};
use geofuse_core::rng::Rng64;
use geofuse_core::{SceneSample, IGNORE_LABEL};
use geofuse_nn::checkpoint::Checkpoint;
use geofuse_nn::model::Model;
use geofuse_nn::trainer::{
    evaluate, lr_at, prepare_view, train, train_loss, train_step, CloudScope, Sgd, TrainConfig, TrainLog,
};
use geofuse_nn::{Error, ParamStore};
use nalgebra::{Matrix4, Vector3};

/// Camera at the origin looking down +z at a back wall (z = 4) split into
/// classes 0 (x < 0) and 1 (x >= 0) of identical color, with a red panel
/// (class 2) at z = 2 in front of it.
fn scene(seed: u64, size: u32, look_away: bool) -> SceneSample {
    let mut rng = Rng64::new(seed);
    let f = size as f64;
    let c = f / 2.0;
    let mut w2c = Matrix4::identity();
    if look_away {
        // Rotate 180 degrees about y: the camera faces -z.
        w2c[(0, 0)] = -1.0;
        w2c[(2, 2)] = -1.0;
    }
    let rig = CameraRig::new(f, f, c, c, size, size, w2c, 0.05).unwrap();
    let (px, py) = (rng.range(-1.2, 0.2), rng.range(-1.0, 0.2));
    let (pw, ph) = (0.8, 0.8);
    let on_panel = |x: f64, y: f64| x >= px && x <= px + pw && y >= py && y <= py + ph;

    let mut positions = Vec::new();
    for _ in 0..500 {
        positions.push(Vector3::new(rng.range(-2.5, 2.5), rng.range(-2.5, 2.5), 4.0));
    }
    for _ in 0..120 {
        positions.push(Vector3::new(px + pw * rng.uniform(), py + ph * rng.uniform(), 2.0));
    }
    let mut rgb = Vec::new();
    let mut labels = Vec::new();
    for row in 0..size {
        for col in 0..size {
            let (dx, dy) = ((col as f64 + 0.5 - c) / f, (row as f64 + 0.5 - c) / f);
            let (label, color) = if on_panel(2.0 * dx, 2.0 * dy) {
                (2u8, [0.8, 0.2, 0.2])
            } else {
                (if 4.0 * dx < 0.0 { 0 } else { 1 }, [0.5, 0.5, 0.5])
            };
            let border = row == 0 || col == 0 || row == size - 1 || col == size - 1;
            labels.push(if border { IGNORE_LABEL } else { label });
            rgb.extend(color.iter().map(|&v: &f64| (v + 0.02 * rng.normal()).clamp(0.0, 1.0) as f32));
        }
    }
    SceneSample {
        rgb,
        labels,
        cloud: PointCloud::new(positions),
        rig,
        scene_id: seed as u32,
        view_id: 0,
    }
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        num_classes: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn one_scene_overfits() {
    let s = scene(1, 32, false);
    let cfg = TrainConfig {
        epochs: 200,
        halve_every: 100,
        ..small_cfg()
    };
    let out = train(&cfg, std::slice::from_ref(&s), std::slice::from_ref(&s)).unwrap();
    let last = out.log.records.last().unwrap();
    assert!(last.train_loss < 0.05, "final train loss {}", last.train_loss);
    let report = evaluate(&out.best, &cfg, std::slice::from_ref(&s)).unwrap();
    assert!(report.metrics.miou > 0.95, "train-set mIoU {}", report.metrics.miou);
}

#[test]
fn a_small_step_decreases_the_loss() {
    let cfg = small_cfg();
    let model = Model::new(&cfg.model_config()).unwrap();
    for seed in 0..20 {
        let view = prepare_view(&scene(100 + seed, 16, false), &cfg).unwrap();
        let mut store: ParamStore<f32> = model.init_params(seed);
        let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
        let before = train_step(&model, &mut store, &mut sgd, &view.input, &view.labels, 1e-4).unwrap();
        let after = train_loss(&model, &store, &view.input, &view.labels).unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn training_is_deterministic() {
    let train_set: Vec<_> = (0..3).map(|i| scene(i, 16, false)).collect();
    let val_set = vec![scene(10, 16, false)];
    let cfg = TrainConfig {
        epochs: 2,
        seed: 4,
        ..small_cfg()
    };
    let a = train(&cfg, &train_set, &val_set).unwrap();
    let b = train(&cfg, &train_set, &val_set).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    assert_eq!(TrainLog::from_csv(&a.log.to_csv()).unwrap(), a.log);
    for r in &a.log.records {
        assert_eq!(r.lr, lr_at(r.epoch, &cfg));
        assert_eq!(r.seconds, 0.0);
    }
    // Momentum buffers travel with the checkpoint.
    let restored = Checkpoint::from_bytes(&a.last.to_bytes().unwrap()).unwrap();
    assert_eq!(restored, a.last);
    assert!(restored.velocity.iter().any(|t| t.name == "seg/classifier.weight.velocity"));
}

#[test]
fn fov_and_visible_scopes_train_differently() {
    let s = scene(7, 16, false);
    let fov = TrainConfig {
        epochs: 1,
        cloud_scope: CloudScope::Fov,
        ..small_cfg()
    };
    let vis = TrainConfig {
        cloud_scope: CloudScope::Visible,
        ..fov.clone()
    };
    let pv = prepare_view(&s, &fov).unwrap();
    assert!(pv.visible_points < pv.frustum_points, "scene must contain occluded points");
    assert_eq!(pv.input.n_points, pv.frustum_points);
    assert_eq!(prepare_view(&s, &vis).unwrap().input.n_points, pv.visible_points);
    let a = train(&fov, std::slice::from_ref(&s), std::slice::from_ref(&s)).unwrap();
    let b = train(&vis, std::slice::from_ref(&s), std::slice::from_ref(&s)).unwrap();
    assert_ne!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
}

#[test]
fn view_without_frustum_points_takes_the_color_path() {
    let away = scene(3, 16, true);
    let cfg = TrainConfig {
        epochs: 1,
        ..small_cfg()
    };
    let pv = prepare_view(&away, &cfg).unwrap();
    assert_eq!(pv.frustum_points, 0);
    assert_eq!(pv.input.n_points, 0);
    let out = train(&cfg, &[away.clone(), scene(4, 16, false)], &[away]).unwrap();
    assert!(out.log.records[0].train_loss.is_finite());
}

#[test]
fn error_paths() {
    let s = scene(1, 16, false);
    let cfg = small_cfg();
    assert!(matches!(train(&cfg, &[], std::slice::from_ref(&s)), Err(Error::EmptyInput(_))));
    let out = train(
        &TrainConfig { epochs: 1, ..cfg.clone() },
        std::slice::from_ref(&s),
        std::slice::from_ref(&s),
    )
    .unwrap();
    assert!(matches!(evaluate(&out.best, &cfg, &[]), Err(Error::EmptyInput(_))));
    let other = TrainConfig {
        num_classes: 4,
        ..cfg.clone()
    };
    assert!(evaluate(&out.best, &other, std::slice::from_ref(&s)).is_err());
    let baseline = TrainConfig {
        use_geometry: false,
        ..cfg
    };
    assert!(evaluate(&out.best, &baseline, std::slice::from_ref(&s)).is_err());
}
