use geofuse_core::rng::Rng64;
use geofuse_core::IGNORE_LABEL;
use geofuse_workbench::scene::{
    gen_scene, gen_scenes, Aabb, Object, Scene, Source, BOX, CEILING, FLOOR, SPHERE, WALL,
};
use geofuse_workbench::{SceneSpec, WorkbenchError};
use nalgebra::Vector3;

fn small_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        seed,
        train_scenes: 3,
        val_scenes: 1,
        points_per_scene: 800,
        image_width: 32,
        image_height: 24,
        views_per_scene: 2,
        ..SceneSpec::default()
    }
}

/// Ray against an axis-aligned rectangle lying in the plane `x[axis] = level`.
fn rect_hit(o: &Vector3<f64>, d: &Vector3<f64>, axis: usize, level: f64, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<f64> {
    if d[axis].abs() < 1e-300 {
        return None;
    }
    let t = (level - o[axis]) / d[axis];
    if t <= 0.0 {
        return None;
    }
    let p = o + d * t;
    let inside = (0..3).filter(|&k| k != axis).all(|k| p[k] >= lo[k] - 1e-12 && p[k] <= hi[k] + 1e-12);
    inside.then_some(t)
}

/// Nearest primitive by testing every face rectangle and every sphere,
/// the latter with the closest-approach construction.
fn brute_class(scene: &Scene, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<u8> {
    let mut best: Option<(f64, u8)> = None;
    let mut offer = |t: f64, c: u8| {
        if best.map_or(true, |(bt, _)| t < bt) {
            best = Some((t, c));
        }
    };
    let r = &scene.room;
    for axis in 0..3 {
        for (level, side_max) in [(r.min[axis], false), (r.max[axis], true)] {
            if let Some(t) = rect_hit(o, d, axis, level, &r.min, &r.max) {
                let c = match (axis, side_max) {
                    (2, false) => FLOOR,
                    (2, true) => CEILING,
                    _ => WALL,
                };
                offer(t, c);
            }
        }
    }
    for obj in &scene.objects {
        match *obj {
            Object::Box(b) => {
                for axis in 0..3 {
                    for level in [b.min[axis], b.max[axis]] {
                        if let Some(t) = rect_hit(o, d, axis, level, &b.min, &b.max) {
                            offer(t, BOX);
                        }
                    }
                }
            }
            Object::Sphere { center, radius } => {
                let u = d.normalize();
                let along = (center - o).dot(&u);
                let miss2 = (center - o).norm_squared() - along * along;
                if miss2 <= radius * radius {
                    let t = (along - (radius * radius - miss2).sqrt()) / d.norm();
                    if t > 0.0 {
                        offer(t, SPHERE);
                    }
                }
            }
        }
    }
    best.map(|(_, c)| c)
}

#[test]
fn same_seed_gives_identical_scenes() {
    let spec = small_spec(11);
    let a = gen_scenes(&spec).unwrap();
    let b = gen_scenes(&spec).unwrap();
    assert_eq!(a, b);
    // Each scene depends only on (seed, id), not on generation order.
    assert_eq!(gen_scene(&spec, 2).unwrap().views, a[4..6].to_vec());
    assert_ne!(gen_scenes(&small_spec(12)).unwrap(), a);
}

#[test]
fn labels_match_brute_force_ray_casting() {
    let spec = small_spec(3);
    let mut rng = Rng64::new(99);
    let mut checked = 0;
    let mut ids = 0u32..;
    while checked < 1000 {
        let scene = gen_scene(&spec, ids.next().unwrap()).unwrap();
        for view in &scene.views {
            let rig = &view.rig;
            let r_t = rig.rotation().transpose();
            let eye = rig.center();
            for _ in 0..100 {
                let col = 1 + rng.below(rig.width as u64 - 2) as usize;
                let row = 1 + rng.below(rig.height as u64 - 2) as usize;
                let cam = Vector3::new(
                    (col as f64 + 0.5 - rig.cx) / rig.fx,
                    (row as f64 + 0.5 - rig.cy) / rig.fy,
                    1.0,
                );
                let expected = brute_class(&scene, &eye, &(r_t * cam)).unwrap_or(IGNORE_LABEL);
                assert_eq!(view.labels[row * rig.width as usize + col], expected, "scene {} pixel ({row}, {col})", scene.id);
                checked += 1;
            }
        }
    }
}

#[test]
fn border_ring_is_ignored_and_interior_is_labelled() {
    for view in gen_scenes(&small_spec(5)).unwrap() {
        let (w, h) = (view.width(), view.height());
        view.validate(5).unwrap();
        for row in 0..h {
            for col in 0..w {
                let l = view.labels[row * w + col];
                let border = row == 0 || col == 0 || row == h - 1 || col == w - 1;
                assert_eq!(border, l == IGNORE_LABEL);
            }
        }
        assert!(view.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn on_face(p: &Vector3<f64>, b: &Aabb, axis: usize, max_side: bool) -> bool {
    let level = if max_side { b.max[axis] } else { b.min[axis] };
    (p[axis] - level).abs() < 1e-9 && (0..3).all(|k| p[k] >= b.min[k] - 1e-9 && p[k] <= b.max[k] + 1e-9)
}

#[test]
fn points_lie_on_their_source_primitive() {
    let spec = small_spec(8);
    for id in 0..4 {
        let scene = gen_scene(&spec, id).unwrap();
        assert_eq!(scene.cloud.len(), spec.points_per_scene);
        for ((p, src), &label) in scene.cloud.positions.iter().zip(&scene.sources).zip(&scene.point_labels) {
            match *src {
                Source::Room { axis, max_side } => {
                    assert!(on_face(p, &scene.room, axis, max_side));
                    assert_eq!(label, if axis != 2 { WALL } else if max_side { CEILING } else { FLOOR });
                }
                Source::Object { index, face } => match (scene.objects[index], face) {
                    (Object::Box(b), Some((axis, max_side))) => {
                        assert!(on_face(p, &b, axis, max_side));
                        assert_eq!(label, BOX);
                    }
                    (Object::Sphere { center, radius }, None) => {
                        assert!(((p - center).norm() - radius).abs() < 1e-9);
                        assert_eq!(label, SPHERE);
                    }
                    other => panic!("inconsistent source {other:?}"),
                },
            }
            assert!(scene.objects.iter().all(|o| !o.contains_strictly(p)));
        }
    }
}

#[test]
fn floor_and_ceiling_differ_only_in_geometry() {
    let spec = SceneSpec {
        train_scenes: 12,
        val_scenes: 0,
        ..small_spec(21)
    };
    let scenes: Vec<Scene> = (0..12).map(|id| gen_scene(&spec, id).unwrap()).collect();

    // Height threshold at mid-room separates the two on the cloud.
    let (mut right, mut total) = (0usize, 0usize);
    for s in &scenes {
        let mid = 0.5 * (s.room.min.z + s.room.max.z);
        for (p, &l) in s.cloud.positions.iter().zip(&s.point_labels) {
            if l == FLOOR || l == CEILING {
                total += 1;
                right += usize::from((p.z < mid) == (l == FLOOR));
            }
        }
    }
    assert!(total > 1000);
    assert!(right as f64 / total as f64 > 0.99);

    // Point colors carry no information at all.
    let mut floor_colors = Vec::new();
    let mut ceiling_colors = Vec::new();
    for s in &scenes {
        let colors = s.cloud.colors.as_ref().unwrap();
        for (c, &l) in colors.iter().zip(&s.point_labels) {
            match l {
                FLOOR => floor_colors.push(*c),
                CEILING => ceiling_colors.push(*c),
                _ => {}
            }
        }
    }
    assert!(floor_colors.iter().chain(&ceiling_colors).all(|c| *c == floor_colors[0]));

    // Noisy pixel colors: a nearest-mean rule fitted on half the scenes
    // stays at chance on the other half.
    let pixels = |range: std::ops::Range<usize>| {
        let mut out: Vec<([f64; 3], bool)> = Vec::new();
        for s in &scenes[range] {
            for v in &s.views {
                for (i, &l) in v.labels.iter().enumerate() {
                    if l == FLOOR || l == CEILING {
                        out.push(([0, 1, 2].map(|k| v.rgb[i * 3 + k] as f64), l == FLOOR));
                    }
                }
            }
        }
        out
    };
    let fit = pixels(0..6);
    let mean = |floor: bool| {
        let sel: Vec<_> = fit.iter().filter(|(_, f)| *f == floor).collect();
        [0, 1, 2].map(|k| sel.iter().map(|(c, _)| c[k]).sum::<f64>() / sel.len() as f64)
    };
    let (mf, mc) = (mean(true), mean(false));
    let dist = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let held = pixels(6..12);
    let recall = |floor: bool| {
        let sel: Vec<_> = held.iter().filter(|(_, f)| *f == floor).collect();
        let hits = sel.iter().filter(|(c, _)| (dist(c, &mf) < dist(c, &mc)) == floor).count();
        hits as f64 / sel.len() as f64
    };
    let balanced = 0.5 * (recall(true) + recall(false));
    assert!(balanced <= 0.55, "balanced accuracy {balanced}");
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SceneSpec { image_width: 30, ..SceneSpec::default() },
        SceneSpec { palette: vec![[0.1, 0.2, 0.3], [0.2, 0.2, 0.3], [0.3, 0.2, 0.3], [0.4, 0.2, 0.3], [0.5, 0.2, 0.3]], ..SceneSpec::default() },
        SceneSpec { palette: vec![[0.5; 3]; 4], ..SceneSpec::default() },
        SceneSpec { box_size: [0.4, 5.0], ..SceneSpec::default() },
        SceneSpec { sphere_radius: [0.2, 2.0], ..SceneSpec::default() },
        SceneSpec { objects: [4, 2], ..SceneSpec::default() },
        SceneSpec { points_per_scene: 0, ..SceneSpec::default() },
        SceneSpec { room_min: [7.0, 4.0, 2.6], ..SceneSpec::default() },
    ];
    for spec in bad {
        assert!(matches!(gen_scene(&spec, 0), Err(WorkbenchError::Spec(_))), "{spec:?}");
    }
    // Too many objects to place without overlap.
    let crowded = SceneSpec {
        room_min: [2.0, 2.0, 2.6],
        room_max: [2.0, 2.0, 2.6],
        objects: [40, 40],
        ..SceneSpec::default()
    };
    assert!(matches!(gen_scene(&crowded, 0), Err(WorkbenchError::Spec(_))));
}
