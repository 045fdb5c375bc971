//! Procedural two-view scenes with exact ground truth.
//!
//! Scenes are rooms of axis-aligned planes with axis-aligned boxes resting
//! on the floor. Every pixel is rendered by analytic ray casting, so depth,
//! pointmaps and correspondences are exact up to floating point rounding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{relative_pose, Intrinsics, Pose, Vec3};
use crate::error::{Error, Result};
use crate::rng::{seeded, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub n_boxes: usize,
    pub baseline_min: f64,
    pub baseline_max: f64,
    pub max_rotation_deg: f64,
    pub min_overlap: f64,
    pub min_correspondences: usize,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_deg: 60.0,
            n_boxes: 3,
            baseline_min: 0.2,
            baseline_max: 0.6,
            max_rotation_deg: 8.0,
            min_overlap: 0.3,
            min_correspondences: 64,
            max_retries: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Checker { period: f64, a: [f64; 3], b: [f64; 3] },
    Gradient { scale: f64, a: [f64; 3], b: [f64; 3] },
}

impl Texture {
    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        match self {
            Texture::Checker { period, a, b } => {
                let parity = ((u / period).floor() + (v / period).floor()).rem_euclid(2.0);
                if parity < 0.5 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Gradient { scale, a, b } => {
                let s = 0.5 + 0.5 * (scale * (u + 0.7 * v)).sin();
                [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s]
            }
        }
    }

    fn random(rng: &mut impl Rng) -> Self {
        let mut col = || [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let (a, b) = (col(), col());
        if rng.random_bool(0.5) {
            Texture::Checker { period: rng.random_range(0.15..0.5), a, b }
        } else {
            Texture::Gradient { scale: rng.random_range(2.0..8.0), a, b }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Infinite plane `x[axis] = offset`.
    Plane { axis: usize, offset: f64, texture: Texture },
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3], texture: Texture },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

/// Ray-hit record: distance along the (unnormalized) direction, primitive
/// index and the axis of the surface normal.
#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    prim: usize,
    axis: usize,
}

const T_EPS: f64 = 1e-9;

impl Scene {
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            let hit = match p {
                Primitive::Plane { axis, offset, .. } => {
                    if d[*axis].abs() < 1e-15 {
                        None
                    } else {
                        let t = (offset - o[*axis]) / d[*axis];
                        (t > T_EPS).then_some((t, *axis))
                    }
                }
                Primitive::Box { min, max, .. } => slab(o, d, min, max),
            };
            if let Some((t, axis)) = hit {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, prim: i, axis });
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit, p: &Vec3) -> [f64; 3] {
        let tex = match &self.primitives[hit.prim] {
            Primitive::Plane { texture, .. } | Primitive::Box { texture, .. } => texture,
        };
        let (u, v) = match hit.axis {
            0 => (p.y, p.z),
            1 => (p.x, p.z),
            _ => (p.x, p.y),
        };
        let c = tex.color(u, v);
        // fixed directional light, normal along the hit axis
        let light = [0.3, -0.8, -0.5];
        let ln = (light[0] * light[0] + light[1] * light[1] + light[2] * light[2] as f64).sqrt();
        let lambert = (light[hit.axis] / ln).abs();
        let k = 0.55 + 0.45 * lambert;
        [c[0] * k, c[1] * k, c[2] * k]
    }
}

fn slab(o: &Vec3, d: &Vec3, min: &[f64; 3], max: &[f64; 3]) -> Option<(f64, usize)> {
    let mut tnear = f64::NEG_INFINITY;
    let mut tfar = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
            continue;
        }
        let t1 = (min[a] - o[a]) / d[a];
        let t2 = (max[a] - o[a]) / d[a];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > tnear {
            tnear = lo;
            axis = a;
        }
        tfar = tfar.min(hi);
    }
    (tnear <= tfar && tnear > T_EPS).then_some((tnear, axis))
}

/// Row-major `height × width × 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Validation(format!("image {width}x{height} needs {} values", width * height * 3)));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height * 3] }
    }

    pub fn to_tensor<T: crate::Scalar>(&self) -> crate::Tensor<T> {
        crate::Tensor::from_f64(vec![self.height, self.width, 3], &self.data)
    }
}

/// Everything one camera sees.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRender {
    pub image: Image,
    /// Camera-frame hit points, `H × W × 3`.
    pub points: Vec<f64>,
    /// World-frame hit points, `H × W × 3`.
    pub world_points: Vec<f64>,
    pub mask: Vec<bool>,
    /// Primitive index per pixel (-1 where nothing was hit).
    pub primitive: Vec<i32>,
}

impl ViewRender {
    pub fn visible_primitives(&self) -> usize {
        let mut ids: Vec<i32> = self.primitive.iter().copied().filter(|&p| p >= 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Ray-casts `scene` from a camera with world→camera `pose`.
///
/// Colors are quantized to multiples of 1/255 so that 8-bit image files
/// reproduce them exactly.
pub fn render_view(scene: &Scene, intrinsics: &Intrinsics, pose: &Pose) -> ViewRender {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let c2w = pose.inverse();
    let center = *c2w.translation();
    let mut image = vec![0.0; w * h * 3];
    let mut points = vec![0.0; w * h * 3];
    let mut world_points = vec![0.0; w * h * 3];
    let mut mask = vec![false; w * h];
    let mut primitive = vec![-1; w * h];
    for row in 0..h {
        for col in 0..w {
            let d_cam = intrinsics.ray(col as f64 + 0.5, row as f64 + 0.5);
            let d_world = c2w.apply_direction(&d_cam);
            let Some(hit) = scene.intersect(&center, &d_world) else { continue };
            let pix = row * w + col;
            let pw = center + d_world * hit.t;
            let pc = d_cam * hit.t;
            let rgb = scene.shade(&hit, &pw);
            for k in 0..3 {
                image[pix * 3 + k] = (rgb[k].clamp(0.0, 1.0) * 255.0).round() / 255.0;
                points[pix * 3 + k] = pc[k];
                world_points[pix * 3 + k] = pw[k];
            }
            mask[pix] = true;
            primitive[pix] = hit.prim as i32;
        }
    }
    ViewRender { image: Image { width: w, height: h, data: image }, points, world_points, mask, primitive }
}

/// Two registered views of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub seed: u64,
    pub intrinsics: Intrinsics,
    /// World→camera poses.
    pub pose_i: Pose,
    pub pose_j: Pose,
    pub image_i: Image,
    pub image_j: Image,
    /// Points of view i in camera-i frame, `H × W × 3`.
    pub gt_pointmap_ii: Vec<f64>,
    /// Points of view j in camera-i frame, `H × W × 3`.
    pub gt_pointmap_ji: Vec<f64>,
    pub valid_mask_i: Vec<bool>,
    pub valid_mask_j: Vec<bool>,
    /// `(u_i, v_i, u_j, v_j)` pixel coordinates of the same 3-D point.
    pub correspondences: Vec<[f64; 4]>,
    pub visible_primitives_i: usize,
    pub visible_primitives_j: usize,
}

impl ScenePair {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Camera-i → camera-j transform.
    pub fn relative(&self) -> Pose {
        self.pose_j.compose(&self.pose_i.inverse())
    }

    /// The same pair with the roles of the two views exchanged.
    pub fn swapped(&self) -> ScenePair {
        let rel = self.relative();
        let map = |pts: &[f64]| -> Vec<f64> {
            pts.chunks(3)
                .flat_map(|p| {
                    let q = rel.apply(&Vec3::new(p[0], p[1], p[2]));
                    [q.x, q.y, q.z]
                })
                .collect()
        };
        ScenePair {
            seed: self.seed,
            intrinsics: self.intrinsics,
            pose_i: self.pose_j,
            pose_j: self.pose_i,
            image_i: self.image_j.clone(),
            image_j: self.image_i.clone(),
            gt_pointmap_ii: map(&self.gt_pointmap_ji),
            gt_pointmap_ji: map(&self.gt_pointmap_ii),
            valid_mask_i: self.valid_mask_j.clone(),
            valid_mask_j: self.valid_mask_i.clone(),
            correspondences: self.correspondences.iter().map(|c| [c[2], c[3], c[0], c[1]]).collect(),
            visible_primitives_i: self.visible_primitives_j,
            visible_primitives_j: self.visible_primitives_i,
        }
    }
}

fn random_scene(rng: &mut impl Rng, n_boxes: usize) -> Scene {
    let back = rng.random_range(4.5..6.0);
    let floor = rng.random_range(1.0..1.6);
    let side = rng.random_range(2.0..3.0);
    let mut primitives = vec![
        Primitive::Plane { axis: 2, offset: back, texture: Texture::random(rng) },
        Primitive::Plane { axis: 1, offset: floor, texture: Texture::random(rng) },
        Primitive::Plane { axis: 0, offset: -side, texture: Texture::random(rng) },
        Primitive::Plane { axis: 0, offset: side, texture: Texture::random(rng) },
    ];
    for _ in 0..n_boxes {
        let (sx, sy, sz) = (rng.random_range(0.3..0.9), rng.random_range(0.3..1.1), rng.random_range(0.3..0.9));
        let cx = rng.random_range(-1.2..1.2);
        let cz = rng.random_range(2.0..3.8);
        primitives.push(Primitive::Box {
            min: [cx - sx / 2.0, floor - sy, cz - sz / 2.0],
            max: [cx + sx / 2.0, floor, cz + sz / 2.0],
            texture: Texture::random(rng),
        });
    }
    Scene { primitives }
}

fn random_rotation(rng: &mut impl Rng, max_deg: f64) -> Vec3 {
    let m = max_deg.to_radians();
    Vec3::new(rng.random_range(-m..=m), rng.random_range(-m..=m), rng.random_range(-m..=m) * 0.3)
}

fn world_to_camera(center: Vec3, axis_angle: Vec3) -> Pose {
    // camera→world rotation from the axis-angle, then invert
    Pose::from_axis_angle(axis_angle, center).inverse()
}

/// Visible-point correspondences from view i into view j, and the overlap
/// fraction over valid pixels of view i.
fn match_views(scene: &Scene, k: &Intrinsics, vi: &ViewRender, pose_j: &Pose) -> (Vec<[f64; 4]>, f64) {
    let (w, h) = (k.width, k.height);
    let cj = pose_j.center();
    let c2w_j = pose_j.inverse();
    let mut corr = Vec::new();
    let mut valid = 0usize;
    for row in 0..h {
        for col in 0..w {
            let pix = row * w + col;
            if !vi.mask[pix] {
                continue;
            }
            valid += 1;
            let pw = Vec3::new(vi.world_points[pix * 3], vi.world_points[pix * 3 + 1], vi.world_points[pix * 3 + 2]);
            let pj = pose_j.apply(&pw);
            if pj.z <= 1e-6 {
                continue;
            }
            let (u, v) = k.project(&pj);
            if !(u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64) {
                continue;
            }
            // re-cast through the sub-pixel location from camera j
            let d = c2w_j.apply_direction(&k.ray(u, v));
            let Some(hit) = scene.intersect(&cj, &d) else { continue };
            if (cj + d * hit.t - pw).norm() < 1e-6 {
                corr.push([col as f64 + 0.5, row as f64 + 0.5, u, v]);
            }
        }
    }
    let overlap = if valid == 0 { 0.0 } else { corr.len() as f64 / valid as f64 };
    (corr, overlap)
}

/// Assembles a pair from an explicit scene and camera placement.
pub fn render_pair(scene: &Scene, intrinsics: &Intrinsics, pose_i: &Pose, pose_j: &Pose, seed: u64) -> Result<(ScenePair, f64)> {
    let vi = render_view(scene, intrinsics, pose_i);
    let vj = render_view(scene, intrinsics, pose_j);
    let (correspondences, overlap) = match_views(scene, intrinsics, &vi, pose_j);
    let j_to_i = relative_pose(pose_j, pose_i)?;
    let gt_ji = vj
        .points
        .chunks(3)
        .flat_map(|p| {
            let q = j_to_i.apply(&Vec3::new(p[0], p[1], p[2]));
            [q.x, q.y, q.z]
        })
        .zip(vj.mask.iter().flat_map(|&m| [m; 3]))
        .map(|(v, m)| if m { v } else { 0.0 })
        .collect();
    let pair = ScenePair {
        seed,
        intrinsics: *intrinsics,
        pose_i: *pose_i,
        pose_j: *pose_j,
        image_i: vi.image.clone(),
        image_j: vj.image.clone(),
        gt_pointmap_ii: vi.points.clone(),
        gt_pointmap_ji: gt_ji,
        valid_mask_i: vi.mask.clone(),
        valid_mask_j: vj.mask.clone(),
        correspondences,
        visible_primitives_i: vi.visible_primitives(),
        visible_primitives_j: vj.visible_primitives(),
    };
    Ok((pair, overlap))
}

/// Deterministic pair for `(seed, config)`.
pub fn generate_scene_pair(seed: u64, config: &SceneConfig) -> Result<ScenePair> {
    if config.baseline_min > config.baseline_max || config.baseline_min < 0.0 {
        return Err(Error::Validation("baseline range must satisfy 0 <= min <= max".into()));
    }
    let k = Intrinsics::from_fov(config.width, config.height, config.fov_deg)?;
    let mut rng = seeded(stream(seed, "scene"));
    let mut best = 0.0f64;
    for _ in 0..config.max_retries.max(1) {
        let scene = random_scene(&mut rng, config.n_boxes);
        let ci = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let pose_i = world_to_camera(ci, random_rotation(&mut rng, config.max_rotation_deg));
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let dir = Vec3::new(side, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)).normalize();
        let baseline = if config.baseline_max > config.baseline_min {
            rng.random_range(config.baseline_min..=config.baseline_max)
        } else {
            config.baseline_min
        };
        let pose_j = world_to_camera(ci + dir * baseline, random_rotation(&mut rng, config.max_rotation_deg));
        let (pair, overlap) = render_pair(&scene, &k, &pose_i, &pose_j, seed)?;
        best = best.max(overlap);
        if overlap >= config.min_overlap && pair.correspondences.len() >= config.min_correspondences {
            return Ok(pair);
        }
    }
    Err(Error::Generation(format!(
        "seed {seed}: no pair with overlap >= {} after {} attempts (best {best:.3})",
        config.min_overlap, config.max_retries
    )))
}

/// Per-pixel depth with validity flags.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

/// z-channel of a camera-frame pointmap; masked pixels are flagged invalid.
pub fn pointmap_to_depth(pointmap: &[f64], mask: &[bool]) -> DepthMap {
    let values: Vec<f64> = pointmap.chunks(3).zip(mask).map(|(p, &m)| if m { p[2] } else { 0.0 }).collect();
    DepthMap { values, valid: mask.to_vec() }
}
