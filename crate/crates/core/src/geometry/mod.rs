//! Pinhole cameras, rigid poses and Plücker raymaps.
//!
//! Conventions: camera frames are x right, y down, z forward. A pixel
//! `(col, row)` covers `[col, col+1) × [row, row+1)` in continuous image
//! coordinates, so its center sits at `(col + 0.5, row + 0.5)`.

pub mod io;
pub mod scene;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use scene::{generate_scene_pair, pointmap_to_depth, render_view, DepthMap, Image, Primitive, Scene, SceneConfig, ScenePair, Texture, ViewRender};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Orthonormality tolerance for rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point and a horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_deg: f64) -> Result<Self> {
        let f = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return invalid(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return invalid("image size must be nonzero");
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return invalid(format!("principal point ({}, {}) outside the image", self.cx, self.cy));
        }
        Ok(())
    }

    /// Unnormalized viewing ray `K⁻¹ [u, v, 1]ᵀ` (z component exactly 1).
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Rigid transform `x ↦ R x + t`.
///
/// Scene poses are world→camera. A relative pose maps camera-i coordinates
/// to camera-j coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let p = Self { rotation, translation };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn translation_only(t: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation: t }
    }

    /// Rotation from an axis-angle vector (radians) plus a translation.
    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        let r = Rotation3::new(axis_angle);
        Self { rotation: *r.matrix(), translation }
    }

    pub fn from_row_major(r: &[f64], t: &[f64]) -> Result<Self> {
        if r.len() != 9 || t.len() != 3 {
            return invalid("pose needs 9 rotation and 3 translation values");
        }
        Self::new(Mat3::from_row_slice(r), Vec3::new(t[0], t[1], t[2]))
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]]
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if !r.iter().chain(self.translation.iter()).all(|x| x.is_finite()) {
            return invalid("pose contains non-finite values");
        }
        let err = (r.transpose() * r - Mat3::identity()).abs().max();
        if err > ROTATION_TOL {
            return invalid(format!("rotation not orthonormal (|RᵀR - I| = {err:e})"));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return invalid(format!("rotation determinant {det} != 1"));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_direction(&self, d: &Vec3) -> Vec3 {
        self.rotation * d
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self { rotation: self.rotation * other.rotation, translation: self.rotation * other.translation + self.translation }
    }

    /// Camera center in the source frame of this (world→camera) transform.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Axis-angle vector and translation, the CLI's 6-float pose encoding.
    pub fn to_axis_angle(&self) -> (Vec3, Vec3) {
        let r = Rotation3::from_matrix_unchecked(self.rotation);
        (r.scaled_axis(), self.translation)
    }
}

/// Transform taking camera-i coordinates to camera-j coordinates,
/// `T_j ∘ T_i⁻¹`, for world→camera poses `pose_i`, `pose_j`.
pub fn relative_pose(pose_i: &Pose, pose_j: &Pose) -> Result<Pose> {
    pose_i.validate()?;
    pose_j.validate()?;
    Ok(pose_j.compose(&pose_i.inverse()))
}

/// Per-cell Plücker rays: channels 0–2 unit direction, 3–5 moment.
#[derive(Clone, Debug, PartialEq)]
pub struct Raymap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// `grid_h × grid_w × 6`, row-major.
    pub data: Vec<f64>,
}

impl Raymap {
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.grid_w + col) * 6;
        &self.data[i..i + 6]
    }

    pub fn direction(&self, row: usize, col: usize) -> Vec3 {
        let c = self.cell(row, col);
        Vec3::new(c[0], c[1], c[2])
    }

    pub fn moment(&self, row: usize, col: usize) -> Vec3 {
        let c = self.cell(row, col);
        Vec3::new(c[3], c[4], c[5])
    }
}

/// Plücker raymap of a camera placed by `cam_to_ref` in the reference frame.
///
/// One ray is cast through the center of every cell of a `grid_h × grid_w`
/// partition of the image. `cam_to_ref` maps the target camera's coordinates
/// into the reference frame, so each ray has origin `o = t` and direction
/// `d = R · normalize(K⁻¹ [u, v, 1])`; the moment is `m = o × d`. Pass the
/// inverse of a [`relative_pose`] result to describe camera j as seen from
/// camera i.
pub fn plucker_raymap(intrinsics: &Intrinsics, cam_to_ref: &Pose, grid_h: usize, grid_w: usize) -> Result<Raymap> {
    intrinsics.validate()?;
    cam_to_ref.validate()?;
    if grid_h == 0 || grid_w == 0 {
        return invalid("raymap grid dimensions must be at least 1");
    }
    let cell_w = intrinsics.width as f64 / grid_w as f64;
    let cell_h = intrinsics.height as f64 / grid_h as f64;
    let origin = *cam_to_ref.translation();
    let mut data = Vec::with_capacity(grid_h * grid_w * 6);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let u = (c as f64 + 0.5) * cell_w;
            let v = (r as f64 + 0.5) * cell_h;
            let d = cam_to_ref.apply_direction(&intrinsics.ray(u, v).normalize());
            let d = d / d.norm();
            let m = origin.cross(&d);
            data.extend_from_slice(&[d.x, d.y, d.z, m.x, m.y, m.z]);
        }
    }
    Ok(Raymap { grid_h, grid_w, data })
}
