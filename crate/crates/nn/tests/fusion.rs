use std::collections::HashMap;

use geofuse_core::geom::PixelProjection;
use geofuse_core::rng::Rng64;
use geofuse_core::IGNORE_LABEL;
use geofuse_nn::fusion::{
    cross_entropy, miou, scatter_backward, scatter_features, ConfusionMatrix, MergeMode, PixelMerge, SegHead,
    SparseFeatureMap, NO_SOURCE,
};
use geofuse_nn::layers::{Grid, Mode};
use geofuse_nn::ParamStore;
use proptest::prelude::*;

fn random_projection(rng: &mut Rng64, grid: Grid) -> PixelProjection {
    let (u, v) = (rng.range(0.0, grid.width as f64), rng.range(0.0, grid.height as f64));
    PixelProjection {
        u,
        v,
        col: u.floor() as i64,
        row: v.floor() as i64,
        // Coarse depths so that ties occur.
        depth: 1.0 + rng.below(4) as f64 * 0.5,
        in_bounds: true,
    }
}

#[test]
fn scatter_matches_dictionary_oracle() {
    let grid = Grid { height: 16, width: 16 };
    for seed in 0..20 {
        let mut rng = Rng64::new(seed);
        let n = 50;
        let proj: Vec<PixelProjection> = (0..n).map(|_| random_projection(&mut rng, grid)).collect();
        let visible: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.8).collect();
        let feats: Vec<f64> = (0..n * 3).map(|_| rng.normal()).collect();
        let map = scatter_features(&feats, 3, &visible, &proj, grid).unwrap();

        let mut best: HashMap<(i64, i64), (f64, usize)> = HashMap::new();
        for i in 0..n {
            if !visible[i] {
                continue;
            }
            let key = (proj[i].row, proj[i].col);
            let cand = (proj[i].depth, i);
            let e = best.entry(key).or_insert(cand);
            if cand.0 < e.0 || (cand.0 == e.0 && cand.1 < e.1) {
                *e = cand;
            }
        }
        assert_eq!(map.occupied_count(), best.len());
        for ((row, col), (depth, i)) in &best {
            let p = (*row as usize) * 16 + *col as usize;
            assert_eq!(map.source_index[p], *i as u32);
            assert_eq!(map.source_depth[p], *depth);
            assert_eq!(map.pixel(p), &feats[i * 3..i * 3 + 3]);
        }

        // Gradient reaches winners only; perturbing any other row leaves the map as is.
        let g: Vec<f64> = (0..grid.pixels() * 3).map(|_| rng.normal()).collect();
        let d = scatter_backward(&map, &g, n);
        let winners: Vec<usize> = best.values().map(|&(_, i)| i).collect();
        for i in 0..n {
            let row = &d[i * 3..i * 3 + 3];
            if winners.contains(&i) {
                let p = proj[i].pixel_index(16);
                assert_eq!(row, &g[p * 3..p * 3 + 3]);
            } else {
                assert!(row.iter().all(|&v| v == 0.0));
                let mut f2 = feats.clone();
                f2[i * 3] += 1.0;
                assert_eq!(scatter_features(&f2, 3, &visible, &proj, grid).unwrap(), map);
            }
        }
    }
}

fn merge_setup(mode: MergeMode) -> (PixelMerge, ParamStore<f32>, Grid, Vec<f32>, SparseFeatureMap<f32>) {
    let merge = PixelMerge::new("merge/", "rgb", mode, 3, 61);
    let mut store = ParamStore::new();
    merge.register(&mut store, &mut Rng64::new(1));
    // Non-trivial running statistics.
    for (name, p) in store.iter_mut() {
        if name.ends_with("running_mean") {
            p.value.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * i as f32);
        }
    }
    let grid = Grid { height: 8, width: 8 };
    let mut rng = Rng64::new(2);
    let rgb: Vec<f32> = (0..grid.pixels() * 3).map(|_| rng.uniform() as f32).collect();
    let mut fmap = SparseFeatureMap::<f32>::empty(grid, 61);
    for p in (0..grid.pixels()).filter(|p| p % 3 == 0) {
        fmap.source_index[p] = p as u32;
        fmap.source_depth[p] = 1.0;
        for c in 0..61 {
            fmap.values[p * 61 + c] = rng.normal() as f32;
        }
    }
    (merge, store, grid, rgb, fmap)
}

#[test]
fn local_merge_isolates_unoccupied_pixels() {
    let (merge, mut store, grid, rgb, fmap) = merge_setup(MergeMode::Local);
    let (base, _) = merge.forward(&store, &rgb, Some(&fmap), grid, Mode::Eval).unwrap();
    let mut rng = Rng64::new(3);
    for w in store.get_mut("merge/fused.weight").unwrap().value.data.iter_mut() {
        *w += rng.normal() as f32;
    }
    let (after, _) = merge.forward(&store, &rgb, Some(&fmap), grid, Mode::Eval).unwrap();
    let mut changed_occupied = false;
    for p in 0..grid.pixels() {
        let (a, b) = (&base[p * 64..(p + 1) * 64], &after[p * 64..(p + 1) * 64]);
        if fmap.occupied(p) {
            changed_occupied |= a != b;
        } else {
            assert_eq!(a, b, "pixel {p}");
        }
    }
    assert!(changed_occupied);
}

#[test]
fn color_weights_do_not_reach_occupied_pixels() {
    let (merge, mut store, grid, rgb, fmap) = merge_setup(MergeMode::Local);
    let (base, _) = merge.forward(&store, &rgb, Some(&fmap), grid, Mode::Eval).unwrap();
    for w in store.get_mut("merge/rgb.weight").unwrap().value.data.iter_mut() {
        *w *= -3.0;
    }
    let (after, _) = merge.forward(&store, &rgb, Some(&fmap), grid, Mode::Eval).unwrap();
    for p in 0..grid.pixels() {
        let same = base[p * 64..(p + 1) * 64] == after[p * 64..(p + 1) * 64];
        assert_eq!(same, fmap.occupied(p), "pixel {p}");
    }
}

#[test]
fn padding_mode_has_no_color_only_weights() {
    let (_, store, ..) = merge_setup(MergeMode::Padding);
    assert!(!store.contains("merge/rgb.weight"));
    assert_eq!(store.get("merge/fused.weight").unwrap().value.shape, vec![64, 64]);
    let (_, store, ..) = merge_setup(MergeMode::Local);
    assert_eq!(store.get("merge/rgb.weight").unwrap().value.shape, vec![64, 3]);
}

fn seg_loss(head: &SegHead, store: &ParamStore<f64>, x: &[f64], grid: Grid, labels: &[u8]) -> f64 {
    let (logits, _) = head.forward(store, x, grid, Mode::Train).unwrap();
    cross_entropy(&logits, labels, head.classes).unwrap().loss
}

#[test]
fn seg_head_matches_finite_differences() {
    let head = SegHead::new("seg/", 3);
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng64::new(5);
    head.register(&mut store, &mut rng);
    let grid = Grid { height: 8, width: 8 };
    let mut x: Vec<f64> = (0..grid.pixels() * 64).map(|_| rng.normal()).collect();
    let labels: Vec<u8> = (0..grid.pixels()).map(|i| if i % 11 == 0 { IGNORE_LABEL } else { rng.below(3) as u8 }).collect();
    let (logits, cache) = head.forward(&store, &x, grid, Mode::Train).unwrap();
    let ce = cross_entropy(&logits, &labels, 3).unwrap();
    let dx = head.backward(&mut store, &cache, &ce.grad, true).unwrap().unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let names: Vec<String> = store.iter().filter(|(_, p)| p.kind.trainable()).map(|(k, _)| k.clone()).collect();
    for name in &names {
        let len = store.value(name).unwrap().len();
        for _ in 0..24 {
            let j = rng.below(len as u64) as usize;
            let orig = store.value(name).unwrap()[j];
            store.get_mut(name).unwrap().value.data[j] = orig + h;
            let lp = seg_loss(&head, &store, &x, grid, &labels);
            store.get_mut(name).unwrap().value.data[j] = orig - h;
            let lm = seg_loss(&head, &store, &x, grid, &labels);
            store.get_mut(name).unwrap().value.data[j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((store.grad(name).unwrap()[j] - fd).abs() / fd.abs().max(1.0));
        }
    }
    for _ in 0..64 {
        let j = rng.below(x.len() as u64) as usize;
        let orig = x[j];
        x[j] = orig + h;
        let lp = seg_loss(&head, &store, &x, grid, &labels);
        x[j] = orig - h;
        let lm = seg_loss(&head, &store, &x, grid, &labels);
        x[j] = orig;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((dx[j] - fd).abs() / fd.abs().max(1.0));
    }
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn seg_head_is_translation_equivariant_in_the_interior() {
    let head = SegHead::new("seg/", 4);
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng64::new(6);
    head.register(&mut store, &mut rng);
    let grid = Grid { height: 16, width: 112 };
    let c = 64;
    let x: Vec<f64> = (0..grid.pixels() * c).map(|_| rng.normal()).collect();
    // Shift right by 8 columns; the vacated strip gets fresh noise.
    let mut shifted = vec![0.0; x.len()];
    for r in 0..grid.height {
        for col in 0..grid.width {
            for k in 0..c {
                shifted[(r * grid.width + col) * c + k] = if col >= 8 {
                    x[(r * grid.width + col - 8) * c + k]
                } else {
                    rng.normal()
                };
            }
        }
    }
    let (a, _) = head.forward(&store, &x, grid, Mode::Eval).unwrap();
    let (b, _) = head.forward(&store, &shifted, grid, Mode::Eval).unwrap();
    for r in 0..grid.height {
        for col in 40..64 {
            for k in 0..4 {
                let va = a[(r * grid.width + col) * 4 + k];
                let vb = b[(r * grid.width + col + 8) * 4 + k];
                assert!((va - vb).abs() < 1e-5, "row {r} col {col}");
            }
        }
    }
}

#[test]
fn cross_entropy_random_case_matches_finite_differences() {
    let mut rng = Rng64::new(7);
    let labels: Vec<u8> = (0..16).map(|_| rng.below(5) as u8).collect();
    let labels: Vec<u8> = labels.iter().map(|&l| if l == 4 { IGNORE_LABEL } else { l }).collect();
    let logits: Vec<f64> = (0..16 * 4).map(|_| 3.0 * rng.normal()).collect();
    let ce = cross_entropy(&logits, &labels, 4).unwrap();
    let h = 1e-5;
    for j in 0..logits.len() {
        let mut p = logits.clone();
        p[j] += h;
        let lp = cross_entropy(&p, &labels, 4).unwrap().loss;
        p[j] -= 2.0 * h;
        let lm = cross_entropy(&p, &labels, 4).unwrap().loss;
        let fd = (lp - lm) / (2.0 * h);
        assert!((ce.grad[j] - fd).abs() / fd.abs().max(1.0) < 1e-8);
    }
}

fn brute_miou(pred: &[u8], gt: &[u8], classes: usize) -> (Vec<Option<f64>>, f64) {
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let (mut inter, mut union) = (0u64, 0u64);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            if p == c && g == c {
                inter += 1;
            }
            if p == c || g == c {
                union += 1;
            }
        }
        ious.push((union > 0).then(|| inter as f64 / union as f64));
    }
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    let m = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    (ious, m)
}

proptest! {
    #[test]
    fn miou_matches_set_oracle(seed in 0u64..10_000, classes in 1usize..7, len in 1usize..200) {
        let mut rng = Rng64::new(seed);
        let gt: Vec<u8> = (0..len).map(|_| {
            let v = rng.below(classes as u64 + 1) as u8;
            if v as usize == classes { IGNORE_LABEL } else { v }
        }).collect();
        let pred: Vec<u8> = (0..len).map(|_| rng.below(classes as u64) as u8).collect();
        let m = miou(&pred, &gt, classes).unwrap();
        let (ious, want) = brute_miou(&pred, &gt, classes);
        prop_assert_eq!(m.per_class_iou.len(), ious.len());
        for (a, b) in m.per_class_iou.iter().zip(&ious) {
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false, "definedness differs"),
            }
        }
        prop_assert!((m.miou - want).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.miou));
    }
}

#[test]
fn summed_confusion_differs_from_mean_of_images() {
    // Image A: 1 pixel class 0 predicted right. Image B: 3 pixels of class 1,
    // one predicted as 0.
    let mut total = ConfusionMatrix::new(2);
    total.add(&[0], &[0]).unwrap();
    total.add(&[1, 1, 0], &[1, 1, 1]).unwrap();
    let a = miou(&[0], &[0], 2).unwrap().miou;
    let b = miou(&[1, 1, 0], &[1, 1, 1], 2).unwrap().miou;
    assert_eq!(a, 1.0);
    // B: class 0 IoU 0/1, class 1 IoU 2/3.
    assert!((b - 1.0 / 3.0).abs() < 1e-12);
    // Summed: class 0 IoU 1/2, class 1 IoU 2/3.
    let agg = total.metrics().miou;
    assert!((agg - 7.0 / 12.0).abs() < 1e-12);
    assert!((agg - (a + b) / 2.0).abs() > 0.05);
    assert_eq!(total.get(1, 0), 1);
    assert_eq!(NO_SOURCE, u32::MAX);
}
