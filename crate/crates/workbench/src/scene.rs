//! Synthetic rooms: an axis-aligned box room (z up) with boxes resting on
//! the floor and floating spheres, sampled into a point cloud and rendered
//! by ray casting from random interior cameras.

use geofuse_core::geom::{CameraRig, PointCloud};
use geofuse_core::rng::Rng64;
use geofuse_core::{SceneSample, IGNORE_LABEL};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WorkbenchError};

pub const FLOOR: u8 = 0;
pub const WALL: u8 = 1;
pub const CEILING: u8 = 2;
pub const BOX: u8 = 3;
pub const SPHERE: u8 = 4;
pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["floor", "wall", "ceiling", "box", "sphere"];

/// Constant term of the shading model.
pub const AMBIENT: f64 = 0.6;
pub const DIFFUSE: f64 = 0.4;
/// The light is horizontal, so floor and ceiling both get ambient light
/// only; with equal albedo they render identically.
pub fn light_direction() -> Vector3<f64> {
    Vector3::new(0.6, 0.8, 0.0)
}

/// Clearance kept between objects, walls and cameras.
const MARGIN: f64 = 0.3;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Room extents are drawn per axis from `[room_min, room_max]` meters.
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    /// Inclusive range of the object count.
    pub objects: [usize; 2],
    /// Box side lengths (and height) range.
    pub box_size: [f64; 2],
    pub sphere_radius: [f64; 2],
    pub points_per_scene: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub views_per_scene: usize,
    pub hfov_deg: f64,
    /// Camera roll about the viewing axis is uniform in `[-max_roll_deg,
    /// max_roll_deg]`. At 0 the image up direction follows the room's.
    pub max_roll_deg: f64,
    pub noise_sigma: f64,
    /// Albedo per class: floor, wall, ceiling, box, sphere.
    pub palette: Vec<[f64; 3]>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_scenes: 64,
            val_scenes: 16,
            room_min: [4.0, 4.0, 2.6],
            room_max: [6.0, 6.0, 3.2],
            objects: [2, 5],
            box_size: [0.4, 1.2],
            sphere_radius: [0.2, 0.5],
            points_per_scene: 1500,
            image_width: 64,
            image_height: 64,
            views_per_scene: 1,
            hfov_deg: 70.0,
            max_roll_deg: 180.0,
            noise_sigma: 0.02,
            palette: vec![
                [0.62, 0.55, 0.45],
                [0.80, 0.78, 0.72],
                [0.62, 0.55, 0.45],
                [0.25, 0.45, 0.75],
                [0.80, 0.35, 0.25],
            ],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WorkbenchError::Spec(m));
        if self.image_width == 0 || self.image_height == 0 || self.image_width % 8 != 0 || self.image_height % 8 != 0 {
            return bad(format!("image size {}x{} must be a positive multiple of 8", self.image_width, self.image_height));
        }
        if self.palette.len() != NUM_CLASSES {
            return bad(format!("palette needs {NUM_CLASSES} colors, got {}", self.palette.len()));
        }
        if self.palette.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("palette values must lie in [0, 1]".into());
        }
        let shared = (0..NUM_CLASSES).any(|a| (a + 1..NUM_CLASSES).any(|b| self.palette[a] == self.palette[b]));
        if !shared {
            return bad("at least two classes must share a color".into());
        }
        for i in 0..3 {
            if !(self.room_min[i] > 0.0 && self.room_min[i] <= self.room_max[i]) {
                return bad("room extents must satisfy 0 < room_min <= room_max".into());
            }
        }
        if self.objects[0] > self.objects[1] {
            return bad("objects range is empty".into());
        }
        if !(self.box_size[0] > 0.0 && self.box_size[0] <= self.box_size[1])
            || !(self.sphere_radius[0] > 0.0 && self.sphere_radius[0] <= self.sphere_radius[1])
        {
            return bad("object size ranges must be positive and ordered".into());
        }
        let floor_span = self.room_min[0].min(self.room_min[1]) - 2.0 * MARGIN;
        if self.objects[1] > 0
            && (self.box_size[1] >= floor_span
                || self.box_size[1] >= self.room_min[2] - 2.0 * MARGIN
                || 2.0 * self.sphere_radius[1] >= floor_span
                || 2.0 * self.sphere_radius[1] >= self.room_min[2] - 2.0 * MARGIN)
        {
            return bad("objects do not fit in the smallest room".into());
        }
        if self.points_per_scene == 0 || self.views_per_scene == 0 {
            return bad("points_per_scene and views_per_scene must be positive".into());
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return bad("hfov_deg must lie in (0, 180)".into());
        }
        if !(0.0..=180.0).contains(&self.max_roll_deg) {
            return bad("max_roll_deg must lie in [0, 180]".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    pub fn total_scenes(&self) -> usize {
        self.train_scenes + self.val_scenes
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    fn overlaps(&self, other: &Aabb, gap: f64) -> bool {
        (0..3).all(|i| self.min[i] < other.max[i] + gap && other.min[i] < self.max[i] + gap)
    }

    pub fn contains_strictly(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] > self.min[i] && p[i] < self.max[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Object {
    Box(Aabb),
    Sphere { center: Vector3<f64>, radius: f64 },
}

impl Object {
    pub fn class(&self) -> u8 {
        match self {
            Object::Box(_) => BOX,
            Object::Sphere { .. } => SPHERE,
        }
    }

    pub fn bounds(&self) -> Aabb {
        match *self {
            Object::Box(b) => b,
            Object::Sphere { center, radius } => Aabb {
                min: center.add_scalar(-radius),
                max: center.add_scalar(radius),
            },
        }
    }

    pub fn contains_strictly(&self, p: &Vector3<f64>) -> bool {
        match self {
            Object::Box(b) => b.contains_strictly(p),
            Object::Sphere { center, radius } => (p - center).norm() < *radius,
        }
    }
}

/// Where a surface sample came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Source {
    /// Room face: axis and side (false = min).
    Room { axis: usize, max_side: bool },
    /// Object index and, for boxes, the face.
    Object { index: usize, face: Option<(usize, bool)> },
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub id: u32,
    pub room: Aabb,
    pub objects: Vec<Object>,
    pub cloud: PointCloud,
    pub sources: Vec<Source>,
    pub point_labels: Vec<u8>,
    pub views: Vec<SceneSample>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub class: u8,
    pub normal: Vector3<f64>,
}

/// Nearest surface along `origin + t dir` (`t > 0`) from inside the room.
pub fn cast_ray(room: &Aabb, objects: &[Object], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best = room_exit(room, origin, dir);
    for o in objects {
        let hit = match *o {
            Object::Box(b) => slab_hit(&b, origin, dir),
            Object::Sphere { center, radius } => sphere_hit(&center, radius, origin, dir),
        };
        if let Some(h) = hit {
            if best.map_or(true, |b| h.t < b.t) {
                best = Some(Hit { class: o.class(), ..h });
            }
        }
    }
    best
}

fn room_exit(room: &Aabb, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<(f64, usize, bool)> = None;
    for i in 0..3 {
        if d[i] == 0.0 {
            continue;
        }
        let max_side = d[i] > 0.0;
        let plane = if max_side { room.max[i] } else { room.min[i] };
        let t = (plane - o[i]) / d[i];
        if t > 0.0 && best.map_or(true, |(bt, ..)| t < bt) {
            best = Some((t, i, max_side));
        }
    }
    best.map(|(t, axis, max_side)| {
        let mut normal = Vector3::zeros();
        normal[axis] = if max_side { -1.0 } else { 1.0 };
        Hit {
            t,
            class: room_class(axis, max_side),
            normal,
        }
    })
}

pub fn room_class(axis: usize, max_side: bool) -> u8 {
    match (axis, max_side) {
        (2, false) => FLOOR,
        (2, true) => CEILING,
        _ => WALL,
    }
}

fn slab_hit(b: &Aabb, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut near_axis = 0;
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i] < b.min[i] || o[i] > b.max[i] {
                return None;
            }
            continue;
        }
        let (t1, t2) = ((b.min[i] - o[i]) / d[i], (b.max[i] - o[i]) / d[i]);
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_near {
            t_near = lo;
            near_axis = i;
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || t_near <= 0.0 {
        return None;
    }
    let mut normal = Vector3::zeros();
    normal[near_axis] = -d[near_axis].signum();
    Some(Hit {
        t: t_near,
        class: BOX,
        normal,
    })
}

fn sphere_hit(c: &Vector3<f64>, r: f64, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    // |o + t d - c|^2 = r^2 with a general (non-unit) direction.
    let oc = o - c;
    let a = d.norm_squared();
    let half_b = oc.dot(d);
    let cc = oc.norm_squared() - r * r;
    let disc = half_b * half_b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let t = (-half_b - disc.sqrt()) / a;
    if t <= 0.0 {
        return None;
    }
    Some(Hit {
        t,
        class: SPHERE,
        normal: (o + d * t - c) / r,
    })
}

/// Colors are 8-bit quantized at generation time, so a sample read back
/// from disk carries exactly the colors it was generated with.
fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Lambert shading of an albedo under the fixed light.
pub fn shade(albedo: &[f64; 3], normal: &Vector3<f64>) -> [f64; 3] {
    let k = AMBIENT + DIFFUSE * normal.dot(&light_direction()).max(0.0);
    albedo.map(|a| a * k)
}

fn draw_room(rng: &mut Rng64, spec: &SceneSpec) -> Aabb {
    let ext = Vector3::from_fn(|i, _| rng.range(spec.room_min[i], spec.room_max[i] + f64::EPSILON).min(spec.room_max[i]));
    Aabb {
        min: Vector3::zeros(),
        max: ext,
    }
}

fn draw_objects(rng: &mut Rng64, spec: &SceneSpec, room: &Aabb) -> Result<Vec<Object>> {
    let count = spec.objects[0] + rng.below((spec.objects[1] - spec.objects[0] + 1) as u64) as usize;
    let mut objects: Vec<Object> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(WorkbenchError::Spec(format!("could not place {count} objects without overlap")));
        }
        let candidate = if rng.uniform() < 0.5 {
            let size = Vector3::from_fn(|_, _| rng.range(spec.box_size[0], spec.box_size[1]));
            let x = rng.range(MARGIN, room.max.x - MARGIN - size.x);
            let y = rng.range(MARGIN, room.max.y - MARGIN - size.y);
            let min = Vector3::new(x, y, 0.0);
            Object::Box(Aabb { min, max: min + size })
        } else {
            let r = rng.range(spec.sphere_radius[0], spec.sphere_radius[1]);
            let lo = r + MARGIN;
            let center = Vector3::new(
                rng.range(lo, room.max.x - lo),
                rng.range(lo, room.max.y - lo),
                rng.range(lo, room.max.z - lo),
            );
            Object::Sphere { center, radius: r }
        };
        let b = candidate.bounds();
        if b.max.x > room.max.x - MARGIN || b.max.y > room.max.y - MARGIN || b.max.z > room.max.z - MARGIN {
            continue;
        }
        if objects.iter().all(|o| !o.bounds().overlaps(&b, 0.05)) {
            objects.push(candidate);
        }
    }
    Ok(objects)
}

struct Patch {
    area: f64,
    source: Source,
}

fn face_rect(b: &Aabb, axis: usize) -> (usize, usize, f64) {
    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
    (u, v, (b.max[u] - b.min[u]) * (b.max[v] - b.min[v]))
}

fn sample_patch(rng: &mut Rng64, room: &Aabb, objects: &[Object], source: Source) -> (Vector3<f64>, Vector3<f64>) {
    let on_face = |rng: &mut Rng64, b: &Aabb, axis: usize, max_side: bool| {
        let (u, v, _) = face_rect(b, axis);
        let mut p = Vector3::zeros();
        p[axis] = if max_side { b.max[axis] } else { b.min[axis] };
        p[u] = rng.range(b.min[u], b.max[u]);
        p[v] = rng.range(b.min[v], b.max[v]);
        p
    };
    match source {
        Source::Room { axis, max_side } => {
            let mut n = Vector3::zeros();
            n[axis] = if max_side { -1.0 } else { 1.0 };
            (on_face(rng, room, axis, max_side), n)
        }
        Source::Object { index, face } => match (objects[index], face) {
            (Object::Box(b), Some((axis, max_side))) => {
                let mut n = Vector3::zeros();
                n[axis] = if max_side { 1.0 } else { -1.0 };
                (on_face(rng, &b, axis, max_side), n)
            }
            (Object::Sphere { center, radius }, _) => {
                // Normalized Gaussian direction is uniform on the sphere.
                let n = loop {
                    let g = Vector3::new(rng.normal(), rng.normal(), rng.normal());
                    if let Some(n) = g.try_normalize(1e-9) {
                        break n;
                    }
                };
                (center + n * radius, n)
            }
            (Object::Box(_), None) => unreachable!("box patches carry a face"),
        },
    }
}

fn sample_cloud(rng: &mut Rng64, spec: &SceneSpec, room: &Aabb, objects: &[Object]) -> (PointCloud, Vec<Source>, Vec<u8>) {
    let mut patches = Vec::new();
    for axis in 0..3 {
        for max_side in [false, true] {
            patches.push(Patch {
                area: face_rect(room, axis).2,
                source: Source::Room { axis, max_side },
            });
        }
    }
    for (index, o) in objects.iter().enumerate() {
        match o {
            Object::Box(b) => {
                for axis in 0..3 {
                    for max_side in [false, true] {
                        // The bottom face rests on the floor and is never seen.
                        if axis == 2 && !max_side {
                            continue;
                        }
                        patches.push(Patch {
                            area: face_rect(b, axis).2,
                            source: Source::Object {
                                index,
                                face: Some((axis, max_side)),
                            },
                        });
                    }
                }
            }
            Object::Sphere { radius, .. } => patches.push(Patch {
                area: 4.0 * std::f64::consts::PI * radius * radius,
                source: Source::Object { index, face: None },
            }),
        }
    }
    let total: f64 = patches.iter().map(|p| p.area).sum();
    let mut positions = Vec::with_capacity(spec.points_per_scene);
    let mut colors = Vec::with_capacity(spec.points_per_scene);
    let mut sources = Vec::with_capacity(spec.points_per_scene);
    let mut labels = Vec::with_capacity(spec.points_per_scene);
    while positions.len() < spec.points_per_scene {
        let mut pick = rng.uniform() * total;
        let mut chosen = patches.len() - 1;
        for (i, p) in patches.iter().enumerate() {
            if pick < p.area {
                chosen = i;
                break;
            }
            pick -= p.area;
        }
        let source = patches[chosen].source;
        let (p, n) = sample_patch(rng, room, objects, source);
        // Floor under a box, or anything swallowed by another object.
        if objects.iter().any(|o| o.contains_strictly(&p)) {
            continue;
        }
        let class = match source {
            Source::Room { axis, max_side } => room_class(axis, max_side),
            Source::Object { index, .. } => objects[index].class(),
        };
        let c = shade(&spec.palette[class as usize], &n);
        positions.push(p);
        colors.push(c.map(|v| (to_u8(v) as f64 / 255.0) as f32));
        sources.push(source);
        labels.push(class);
    }
    (
        PointCloud {
            positions,
            colors: Some(colors),
        },
        sources,
        labels,
    )
}

fn draw_camera(rng: &mut Rng64, spec: &SceneSpec, room: &Aabb, objects: &[Object]) -> Result<CameraRig> {
    let inner = |rng: &mut Rng64| Vector3::from_fn(|i, _| rng.range(room.min[i] + MARGIN, room.max[i] - MARGIN));
    for _ in 0..MAX_ATTEMPTS {
        let eye = inner(rng);
        let target = inner(rng);
        let clear = objects.iter().all(|o| {
            let b = o.bounds();
            !Aabb {
                min: b.min.add_scalar(-0.15),
                max: b.max.add_scalar(0.15),
            }
            .contains_strictly(&eye)
        });
        let dir = target - eye;
        if !clear || dir.norm() < 1.0 || (dir.z / dir.norm()).abs() > 0.9 {
            continue;
        }
        // Room up, projected off the viewing axis, then rolled about it.
        let forward = dir / dir.norm();
        let level = (Vector3::z() - forward * forward.z).normalize();
        let roll = rng.range(-spec.max_roll_deg, spec.max_roll_deg).to_radians();
        let up = level * roll.cos() + forward.cross(&level) * roll.sin();
        return Ok(CameraRig::look_at(
            eye,
            target,
            up,
            spec.image_width,
            spec.image_height,
            spec.hfov_deg.to_radians(),
        )?);
    }
    Err(WorkbenchError::Spec("no valid camera pose found".into()))
}

/// Label and noiseless color of every pixel center.
pub fn render_clean(room: &Aabb, objects: &[Object], rig: &CameraRig, palette: &[[f64; 3]]) -> (Vec<u8>, Vec<[f64; 3]>) {
    let r_t = rig.rotation().transpose();
    let eye = rig.center();
    let (w, h) = (rig.width as usize, rig.height as usize);
    let mut labels = Vec::with_capacity(w * h);
    let mut colors = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let dir = r_t * rig.ray_direction(col as f64 + 0.5, row as f64 + 0.5);
            match cast_ray(room, objects, &eye, &dir) {
                Some(hit) => {
                    labels.push(hit.class);
                    colors.push(shade(&palette[hit.class as usize], &hit.normal));
                }
                None => {
                    labels.push(IGNORE_LABEL);
                    colors.push([0.0; 3]);
                }
            }
        }
    }
    (labels, colors)
}

/// One scene, deterministic in `(spec.seed, id)`.
pub fn gen_scene(spec: &SceneSpec, id: u32) -> Result<Scene> {
    spec.validate()?;
    let mut rng = Rng64::new(spec.seed ^ id as u64);
    let room = draw_room(&mut rng, spec);
    let objects = draw_objects(&mut rng, spec, &room)?;
    let (cloud, sources, point_labels) = sample_cloud(&mut rng, spec, &room, &objects);
    let mut views = Vec::with_capacity(spec.views_per_scene);
    for view in 0..spec.views_per_scene {
        let rig = draw_camera(&mut rng, spec, &room, &objects)?;
        let (mut labels, clean) = render_clean(&room, &objects, &rig, &spec.palette);
        let (w, h) = (rig.width as usize, rig.height as usize);
        let mut rgb = Vec::with_capacity(w * h * 3);
        for c in &clean {
            for v in c {
                rgb.push(to_u8(v + spec.noise_sigma * rng.normal()) as f32 / 255.0);
            }
        }
        // Unlabelled border ring.
        for row in 0..h {
            for col in 0..w {
                if row == 0 || col == 0 || row == h - 1 || col == w - 1 {
                    labels[row * w + col] = IGNORE_LABEL;
                }
            }
        }
        views.push(SceneSample {
            rgb,
            labels,
            cloud: cloud.clone(),
            rig,
            scene_id: id,
            view_id: view as u32,
        });
    }
    Ok(Scene {
        id,
        room,
        objects,
        cloud,
        sources,
        point_labels,
        views,
    })
}

/// Train scenes get ids `0..train_scenes`, validation scenes follow.
pub fn scene_ids(spec: &SceneSpec) -> (Vec<u32>, Vec<u32>) {
    let t = spec.train_scenes as u32;
    ((0..t).collect(), (t..t + spec.val_scenes as u32).collect())
}

/// All views of every scene, train scenes first.
pub fn gen_scenes(spec: &SceneSpec) -> Result<Vec<SceneSample>> {
    let mut out = Vec::new();
    for id in 0..spec.total_scenes() as u32 {
        out.extend(gen_scene(spec, id)?.views);
    }
    Ok(out)
}
