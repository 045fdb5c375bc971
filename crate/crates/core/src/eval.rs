//! Depth and point-cloud metrics and PLY export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    None,
    PerFrameMedian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub abs_rel: f64,
    pub delta_125: f64,
    pub n_valid: usize,
    pub scaling_mode: ScalingMode,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Abs Rel and δ<1.25 over pixels with `mask` set and positive ground truth.
pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: &[bool], scaling: ScalingMode) -> Result<DepthReport> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return invalid(format!("depth sizes differ: pred {}, gt {}, mask {}", pred.len(), gt.len(), mask.len()));
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| mask[i] && gt[i] > 0.0).collect();
    if idx.is_empty() {
        return invalid("no valid pixels for depth evaluation");
    }
    let scale = match scaling {
        ScalingMode::None => 1.0,
        ScalingMode::PerFrameMedian => {
            let mp = median(idx.iter().map(|&i| pred[i]).collect());
            if mp == 0.0 || !mp.is_finite() {
                return invalid("median predicted depth is zero or non-finite");
            }
            median(idx.iter().map(|&i| gt[i]).collect()) / mp
        }
    };
    let (mut rel, mut within) = (0.0, 0usize);
    for &i in &idx {
        let p = pred[i] * scale;
        rel += (p - gt[i]).abs() / gt[i];
        if p > 0.0 && (p / gt[i]).max(gt[i] / p) < 1.25 {
            within += 1;
        }
    }
    let n = idx.len();
    Ok(DepthReport { abs_rel: rel / n as f64, delta_125: within as f64 / n as f64, n_valid: n, scaling_mode: scaling })
}

fn nearest_mean(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let d: Vec<f64> = from
        .par_iter()
        .map(|a| {
            to.iter()
                .map(|b| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// `½ (mean_a min_b ‖a−b‖ + mean_b min_a ‖a−b‖)`, exact nearest neighbours.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return invalid("chamfer distance needs two nonempty point sets");
    }
    Ok(0.5 * (nearest_mean(a, b) + nearest_mean(b, a)))
}

/// Masked points of an `H×W×3` pointmap divided by their mean norm, the
/// scale convention of the regression loss.
pub fn normalized_points(pointmap: &[f64], mask: &[bool]) -> Result<Vec<[f64; 3]>> {
    if pointmap.len() != 3 * mask.len() {
        return invalid("pointmap and mask sizes differ");
    }
    let pts: Vec<[f64; 3]> = pointmap.chunks(3).zip(mask).filter(|(_, &m)| m).map(|(p, _)| [p[0], p[1], p[2]]).collect();
    if pts.is_empty() {
        return invalid("empty mask");
    }
    let s = pts.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).sum::<f64>() / pts.len() as f64;
    if !(s > 0.0) {
        return invalid("points have zero mean norm");
    }
    Ok(pts.into_iter().map(|p| [p[0] / s, p[1] / s, p[2] / s]).collect())
}

/// Chamfer between a predicted and a ground-truth pointmap after each is
/// normalized by its own mean norm over `mask`.
pub fn aligned_chamfer(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    chamfer(&normalized_points(pred, mask)?, &normalized_points(gt, mask)?)
}

/// Writes an ASCII PLY of the points whose confidence is at least
/// `conf_threshold`; returns the vertex count. Colors are in `[0, 1]`.
pub fn export_ply(path: &Path, points: &[f64], colors: &[f64], confidence: &[f64], conf_threshold: f64) -> Result<usize> {
    let n = confidence.len();
    if points.len() != 3 * n || colors.len() != 3 * n {
        return invalid(format!("PLY export: {} points, {} colors, {n} confidences", points.len() / 3, colors.len() / 3));
    }
    let keep: Vec<usize> = (0..n).filter(|&i| confidence[i] >= conf_threshold).collect();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", keep.len());
    out.push_str("property float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for &i in &keep {
        let p = &points[3 * i..3 * i + 3];
        let c: Vec<u8> = colors[3 * i..3 * i + 3].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let _ = writeln!(out, "{:.8e} {:.8e} {:.8e} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    fs::write(path, out)?;
    Ok(keep.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut r = seeded(seed);
        (0..n).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect()
    }

    #[test]
    fn depth_closed_forms() {
        let gt: Vec<f64> = (1..=20).map(|i| i as f64 * 0.3).collect();
        let mask = vec![true; 20];
        let r = depth_metrics(&gt, &gt, &mask, ScalingMode::None).unwrap();
        assert_eq!((r.abs_rel, r.delta_125, r.n_valid), (0.0, 1.0, 20));
        let doubled: Vec<f64> = gt.iter().map(|v| 2.0 * v).collect();
        let r = depth_metrics(&doubled, &gt, &mask, ScalingMode::None).unwrap();
        assert!((r.abs_rel - 1.0).abs() < 1e-12 && r.delta_125 == 0.0);
        let r = depth_metrics(&doubled, &gt, &mask, ScalingMode::PerFrameMedian).unwrap();
        assert!(r.abs_rel < 1e-12 && r.delta_125 == 1.0);
        assert!(depth_metrics(&gt, &gt, &vec![false; 20], ScalingMode::None).is_err());
        let zeros = vec![0.0; 20];
        assert!(depth_metrics(&gt, &zeros, &mask, ScalingMode::None).is_err());
    }

    #[test]
    fn chamfer_closed_forms_and_brute_force() {
        assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 1.0);
        let a = cloud(100, 1);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &[]).is_err());
        for seed in 0..5 {
            let (a, b) = (cloud(100, 10 + seed), cloud(100, 20 + seed));
            let dist = |p: &[f64; 3], q: &[f64; 3]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            let mut ab = 0.0;
            for p in &a {
                let mut best = f64::MAX;
                for q in &b {
                    best = best.min(dist(p, q));
                }
                ab += best;
            }
            let mut ba = 0.0;
            for q in &b {
                let mut best = f64::MAX;
                for p in &a {
                    best = best.min(dist(p, q));
                }
                ba += best;
            }
            let want = 0.5 * (ab / 100.0 + ba / 100.0);
            assert!((chamfer(&a, &b).unwrap() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn chamfer_grows_with_translation_of_disjoint_sets() {
        let a = cloud(50, 3);
        let mut last = 0.0;
        for k in 1..6 {
            let b: Vec<[f64; 3]> = cloud(50, 4).iter().map(|p| [p[0] + 3.0 + k as f64, p[1], p[2]]).collect();
            let c = chamfer(&a, &b).unwrap();
            assert!(c > last);
            last = c;
        }
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric(sa in 0u64..1000, sb in 0u64..1000, na in 1usize..40, nb in 1usize..40) {
            let (a, b) = (cloud(na, sa), cloud(nb, sb + 5000));
            prop_assert!((chamfer(&a, &b).unwrap() - chamfer(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn delta_is_scale_invariant(seed in 0u64..1000, c in 0.1f64..10.0) {
            let mut r = seeded(seed);
            let gt: Vec<f64> = (0..64).map(|_| r.random_range(0.5..5.0)).collect();
            let pred: Vec<f64> = gt.iter().map(|g| g * r.random_range(0.7..1.4)).collect();
            let mask = vec![true; 64];
            let a = depth_metrics(&pred, &gt, &mask, ScalingMode::None).unwrap();
            let ps: Vec<f64> = pred.iter().map(|v| v * c).collect();
            let gs: Vec<f64> = gt.iter().map(|v| v * c).collect();
            let b = depth_metrics(&ps, &gs, &mask, ScalingMode::None).unwrap();
            prop_assert_eq!(a.delta_125, b.delta_125);
        }
    }

    /// Minimal reader for the ASCII layout written by [`export_ply`].
    fn read_ply(path: &Path) -> (usize, Vec<[f64; 3]>, Vec<[u8; 3]>) {
        let text = fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("ply"));
        let mut count = None;
        for l in lines.by_ref() {
            if let Some(n) = l.strip_prefix("element vertex ") {
                count = Some(n.parse::<usize>().unwrap());
            }
            if l == "end_header" {
                break;
            }
        }
        let (mut pts, mut cols) = (Vec::new(), Vec::new());
        for l in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            pts.push([f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap()]);
            cols.push([f[3].parse().unwrap(), f[4].parse().unwrap(), f[5].parse().unwrap()]);
        }
        (count.unwrap(), pts, cols)
    }

    #[test]
    fn ply_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        let pts = [0.1, -2.5, 3.0, 1e-3, 7.25, -0.0625, 1.0 / 3.0, 2.0, 9.0];
        let cols = [1.0, 0.0, 0.5, 0.2, 0.2, 0.2, 0.0, 0.0, 0.0];
        assert_eq!(export_ply(&path, &pts, &cols, &[0.5, 0.5, 0.5], 1.0).unwrap(), 0);
        let (n, p, _) = read_ply(&path);
        assert_eq!((n, p.len()), (0, 0));
        assert_eq!(export_ply(&path, &pts, &cols, &[2.0, 0.5, 3.0], 1.0).unwrap(), 2);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 2\n"));
        let (n, p, c) = read_ply(&path);
        assert_eq!((n, p.len()), (2, 2));
        for (got, want) in p.iter().flatten().zip(pts[..3].iter().chain(&pts[6..9])) {
            assert!((got - want).abs() <= 1e-8 * want.abs().max(1e-300));
        }
        assert_eq!(c[0], [255, 0, 128]);
        assert!(export_ply(&dir.path().join("missing/x.ply"), &pts, &cols, &[2.0; 3], 1.0).is_err());
    }
}
