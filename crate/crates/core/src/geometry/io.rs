//! On-disk layout of a scene pair.
//!
//! ```text
//! meta.json            seed, intrinsics, row-major poses, counts
//! image_{i,j}.ppm      binary P6
//! pointmap_{ii,ji}.f32 little-endian row-major float32, H×W×3
//! mask_{i,j}.u8        one byte per pixel (0 or 1)
//! corr.f32             N×4 (u_i, v_i, u_j, v_j)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Image, Intrinsics, Pose, ScenePair};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PoseJson {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<&Pose> for PoseJson {
    fn from(p: &Pose) -> Self {
        let t = p.translation();
        Self { rotation: p.rotation_row_major(), translation: [t.x, t.y, t.z] }
    }
}

impl PoseJson {
    fn to_pose(&self) -> Result<Pose> {
        Pose::from_row_major(&self.rotation, &self.translation)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    seed: u64,
    intrinsics: Intrinsics,
    pose_i: PoseJson,
    pose_j: PoseJson,
    num_correspondences: usize,
    visible_primitives_i: usize,
    visible_primitives_j: usize,
}

pub fn write_f32_le(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return invalid(format!("{}: length {} is not a multiple of 4", path.display(), bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    // header: magic, width, height, maxval separated by whitespace
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return invalid(format!("{}: truncated PPM header", path.display()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return invalid(format!("{}: expected 8-bit P6", path.display()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Validation(format!("bad PPM dimension {s}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| Error::Validation(format!("{}: truncated PPM data", path.display())))?;
    Image::new(w, h, body.iter().map(|&b| b as f64 / 255.0).collect())
}

fn write_mask(path: &Path, mask: &[bool]) -> Result<()> {
    fs::write(path, mask.iter().map(|&m| m as u8).collect::<Vec<u8>>())?;
    Ok(())
}

fn read_mask(path: &Path, n: usize) -> Result<Vec<bool>> {
    let bytes = fs::read(path)?;
    if bytes.len() != n {
        return invalid(format!("{}: expected {n} mask bytes, got {}", path.display(), bytes.len()));
    }
    Ok(bytes.iter().map(|&b| b != 0).collect())
}

pub fn save_pair(pair: &ScenePair, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = Meta {
        seed: pair.seed,
        intrinsics: pair.intrinsics,
        pose_i: (&pair.pose_i).into(),
        pose_j: (&pair.pose_j).into(),
        num_correspondences: pair.correspondences.len(),
        visible_primitives_i: pair.visible_primitives_i,
        visible_primitives_j: pair.visible_primitives_j,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    write_ppm(&dir.join("image_i.ppm"), &pair.image_i)?;
    write_ppm(&dir.join("image_j.ppm"), &pair.image_j)?;
    write_f32_le(&dir.join("pointmap_ii.f32"), pair.gt_pointmap_ii.iter().copied())?;
    write_f32_le(&dir.join("pointmap_ji.f32"), pair.gt_pointmap_ji.iter().copied())?;
    write_mask(&dir.join("mask_i.u8"), &pair.valid_mask_i)?;
    write_mask(&dir.join("mask_j.u8"), &pair.valid_mask_j)?;
    write_f32_le(&dir.join("corr.f32"), pair.correspondences.iter().flatten().copied())?;
    Ok(())
}

/// Reads a pair back. Pointmaps and correspondences come back at float32
/// precision; images are exact because rendering quantizes to 8 bits.
pub fn load_pair(dir: &Path) -> Result<ScenePair> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    meta.intrinsics.validate()?;
    let (w, h) = (meta.intrinsics.width, meta.intrinsics.height);
    let image_i = read_ppm(&dir.join("image_i.ppm"))?;
    let image_j = read_ppm(&dir.join("image_j.ppm"))?;
    if (image_i.width, image_i.height) != (w, h) || (image_j.width, image_j.height) != (w, h) {
        return invalid("image size does not match intrinsics");
    }
    let pm_ii = read_f32_le(&dir.join("pointmap_ii.f32"))?;
    let pm_ji = read_f32_le(&dir.join("pointmap_ji.f32"))?;
    if pm_ii.len() != w * h * 3 || pm_ji.len() != w * h * 3 {
        return invalid("pointmap size does not match intrinsics");
    }
    let corr = read_f32_le(&dir.join("corr.f32"))?;
    if corr.len() % 4 != 0 {
        return invalid("corr.f32 must hold N×4 values");
    }
    Ok(ScenePair {
        seed: meta.seed,
        intrinsics: meta.intrinsics,
        pose_i: meta.pose_i.to_pose()?,
        pose_j: meta.pose_j.to_pose()?,
        image_i,
        image_j,
        gt_pointmap_ii: pm_ii,
        gt_pointmap_ji: pm_ji,
        valid_mask_i: read_mask(&dir.join("mask_i.u8"), w * h)?,
        valid_mask_j: read_mask(&dir.join("mask_j.u8"), w * h)?,
        correspondences: corr.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
        visible_primitives_i: meta.visible_primitives_i,
        visible_primitives_j: meta.visible_primitives_j,
    })
}
