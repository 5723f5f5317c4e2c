//! Depth and camera-trajectory evaluation.
//!
//! Depth errors are reported after an optional per-sequence median-ratio
//! scale alignment (scale only, no shift). Trajectory error (ATE) aligns the
//! predicted centers to ground truth with a closed-form 7-DoF similarity
//! (rotation, translation, scale) before taking the RMSE; relative pose
//! errors compare per-step translation magnitudes and geodesic rotation
//! angles over frame pairs (i, i + delta).

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::fmath;
use crate::postopt::{CameraSet, DepthSet};
use crate::tape::rot_from_unit_quat;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthReport {
    /// Mean of |pred - gt| / gt after alignment.
    pub abs_rel: f64,
    /// Fraction of pixels with max(pred/gt, gt/pred) < 1.25.
    pub delta_125: f64,
    /// The median-ratio scale applied to predictions (1.0 if unaligned).
    pub alignment_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajReport {
    /// RMSE of center residuals after similarity alignment (scene units).
    pub ate: f64,
    /// RMSE of relative-translation magnitude errors (scene units).
    pub rpe_t: f64,
    /// RMSE of relative-rotation geodesic angles (degrees).
    pub rpe_r: f64,
}

/// A similarity transform `x -> scale * R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            self.scale * (r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2]) + self.translation[0],
            self.scale * (r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2]) + self.translation[1],
            self.scale * (r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2]) + self.translation[2],
        ]
    }
}

/// Median of a slice; for even lengths the average of the two central
/// values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("median of an empty slice".into()));
    }
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Closed-form least-squares similarity aligning `src` onto `dst`
/// (orthogonal Procrustes with scale).
pub fn umeyama_alignment(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::Dimension(format!(
            "umeyama: {} source points vs {} targets",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 2 {
        return Err(Error::Domain("umeyama: need at least two points".into()));
    }
    let n = src.len() as f64;
    let mut mu_s = [0.0; 3];
    let mut mu_d = [0.0; 3];
    for (s, d) in src.iter().zip(dst) {
        for k in 0..3 {
            mu_s[k] += s[k] / n;
            mu_d[k] += d[k] / n;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = Vector3::new(s[0] - mu_s[0], s[1] - mu_s[1], s[2] - mu_s[2]);
        let dc = Vector3::new(d[0] - mu_d[0], d[1] - mu_d[1], d[2] - mu_d[2]);
        cov += dc * sc.transpose() / n;
        var_src += sc.norm_squared() / n;
    }

    if var_src < 1e-30 {
        // all source points coincide: translation-only alignment
        return Ok(Similarity {
            scale: 1.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [mu_d[0] - mu_s[0], mu_d[1] - mu_s[1], mu_d[2] - mu_s[2]],
        });
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numeric("umeyama: SVD failed".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("umeyama: SVD failed".into()))?;
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        s_diag[2] = -1.0;
    }
    let rot = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let scale = (svd.singular_values.dot(&s_diag)) / var_src;
    let mu_s_v = Vector3::new(mu_s[0], mu_s[1], mu_s[2]);
    let mu_d_v = Vector3::new(mu_d[0], mu_d[1], mu_d[2]);
    let t = mu_d_v - rot * mu_s_v * scale;

    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = rot[(i, j)];
        }
    }
    Ok(Similarity {
        scale,
        rotation,
        translation: [t[0], t[1], t[2]],
    })
}

/// Depth accuracy against ground truth. Pixels with `gt <= 0` are skipped;
/// with `align` the predictions are first scaled by `median(gt / pred)`.
pub fn depth_metrics(pred: &DepthSet, gt: &DepthSet, align: bool) -> Result<DepthReport> {
    if pred.frame_count() != gt.frame_count()
        || pred.height != gt.height
        || pred.width != gt.width
    {
        return Err(Error::Dimension(format!(
            "depth_metrics: pred {}x{}x{} vs gt {}x{}x{}",
            pred.frame_count(),
            pred.height,
            pred.width,
            gt.frame_count(),
            gt.height,
            gt.width
        )));
    }
    let mut ratios = Vec::new();
    let mut pairs = Vec::new();
    for i in 0..pred.frame_count() {
        let p = pred.depth_frame(i);
        let g = gt.depth_frame(i);
        for (pv, gv) in p.iter().zip(g.iter()) {
            if *gv > 0.0 && *pv > 0.0 {
                ratios.push(gv / pv);
                pairs.push((*pv, *gv));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Domain("depth_metrics: no valid pixels".into()));
    }
    let scale = if align { median(&ratios)? } else { 1.0 };
    let mut abs_rel = 0.0;
    let mut inliers = 0usize;
    for &(p, g) in &pairs {
        let ps = p * scale;
        abs_rel += fmath::abs(ps - g) / g;
        let ratio = if ps > g { ps / g } else { g / ps };
        if ratio < 1.25 {
            inliers += 1;
        }
    }
    Ok(DepthReport {
        abs_rel: abs_rel / pairs.len() as f64,
        delta_125: inliers as f64 / pairs.len() as f64,
        alignment_scale: scale,
    })
}

fn geodesic_angle_deg(ra: &[f64; 9], rb: &[f64; 9]) -> f64 {
    // trace(ra^T rb) is the element-wise dot of the two matrices
    let tr: f64 = ra.iter().zip(rb.iter()).map(|(a, b)| a * b).sum();
    let cos = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    fmath::acos(cos) * 180.0 / core::f64::consts::PI
}

/// Trajectory accuracy: similarity-aligned ATE plus relative pose errors at
/// the given frame spacing.
pub fn traj_metrics(pred: &CameraSet, gt: &CameraSet, delta: usize) -> Result<TrajReport> {
    let n = pred.frame_count();
    if n != gt.frame_count() {
        return Err(Error::Dimension(format!(
            "traj_metrics: {} predicted frames vs {} ground truth",
            n,
            gt.frame_count()
        )));
    }
    if n < 2 {
        return Err(Error::Domain(
            "traj_metrics: need at least two frames".into(),
        ));
    }
    if delta == 0 || delta >= n {
        return Err(Error::Domain(format!(
            "traj_metrics: delta {delta} outside [1, {}]",
            n - 1
        )));
    }

    let sim = umeyama_alignment(&pred.centers, &gt.centers)?;
    let mut se = 0.0;
    for (p, g) in pred.centers.iter().zip(&gt.centers) {
        let a = sim.apply(p);
        for k in 0..3 {
            let d = a[k] - g[k];
            se += d * d;
        }
    }
    let ate = fmath::sqrt(se / n as f64);

    let mut te = 0.0;
    let mut re = 0.0;
    let pairs = n - delta;
    for i in 0..pairs {
        let dp: f64 = {
            let mut s = 0.0;
            for k in 0..3 {
                let d = pred.centers[i + delta][k] - pred.centers[i][k];
                s += d * d;
            }
            fmath::sqrt(s)
        };
        let dg: f64 = {
            let mut s = 0.0;
            for k in 0..3 {
                let d = gt.centers[i + delta][k] - gt.centers[i][k];
                s += d * d;
            }
            fmath::sqrt(s)
        };
        te += (dp - dg) * (dp - dg);

        let rp_a = rot_from_unit_quat(&pred.rotations[i]);
        let rp_b = rot_from_unit_quat(&pred.rotations[i + delta]);
        let rg_a = rot_from_unit_quat(&gt.rotations[i]);
        let rg_b = rot_from_unit_quat(&gt.rotations[i + delta]);
        // relative rotations R_i^T R_{i+d} per trajectory, then the angle
        // between them
        let rel = |a: &[f64; 9], b: &[f64; 9]| {
            let mut m = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    let mut s = 0.0;
                    for k in 0..3 {
                        s += a[k * 3 + r] * b[k * 3 + c];
                    }
                    m[r * 3 + c] = s;
                }
            }
            m
        };
        let rel_p = rel(&rp_a, &rp_b);
        let rel_g = rel(&rg_a, &rg_b);
        let ang = geodesic_angle_deg(&rel_p, &rel_g);
        re += ang * ang;
    }
    Ok(TrajReport {
        ate,
        rpe_t: fmath::sqrt(te / pairs as f64),
        rpe_r: fmath::sqrt(re / pairs as f64),
    })
}
