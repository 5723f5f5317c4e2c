//! Global optimization recovering per-frame intrinsics, rotations, camera
//! centers, and depth maps from pointmaps.
//!
//! A pixel (u, v) with depth D in frame i maps to the world point
//! `X = R^T (D K^{-1} (u, v, 1)^T) + o` with `K = [[f,0,cx],[0,f,cy],[0,0,1]]`.
//! The pointmap alignment loss is the L1 distance between these model points
//! and the observed pointmaps, summed over frames and pixels; a trajectory
//! smoothness term penalizes `||R_i^T R_{i+1} - I||_F + ||o_{i+1} - o_i||_2`
//! between neighbours. Frame 0 is pinned to the identity pose, rotations are
//! unit quaternions renormalized after every step, and depths are
//! parameterized in log space so they stay positive.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::grids::PixelVideo;
use crate::optim::{OptimConfig, ParamId, ParamSet};
use crate::tape::{rot_from_unit_quat, Tape, Var};

pub const IDENTITY_QUAT: [f64; 4] = [0.0, 0.0, 0.0, 1.0];

/// Cadence of the exact depth and center refits inside [`optimize`].
const REFIT_EVERY: usize = 10;

/// Per-frame pinhole cameras with one focal each and a shared principal
/// point at the image center.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraSet {
    pub focals: Vec<f64>,
    pub cx: f64,
    pub cy: f64,
    /// Unit quaternions (x, y, z, w) of the world-to-camera rotations.
    pub rotations: Vec<[f64; 4]>,
    /// Camera centers in the global frame.
    pub centers: Vec<[f64; 3]>,
}

impl CameraSet {
    pub fn frame_count(&self) -> usize {
        self.focals.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotations.len() != self.focals.len() || self.centers.len() != self.focals.len() {
            return Err(Error::Dimension(format!(
                "camera set: {} focals, {} rotations, {} centers",
                self.focals.len(),
                self.rotations.len(),
                self.centers.len()
            )));
        }
        if let Some(bad) = self.focals.iter().position(|&f| !(f > 0.0)) {
            return Err(Error::Domain(format!(
                "camera set: focal of frame {bad} is not positive"
            )));
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let n: f64 = q.iter().map(|x| x * x).sum();
            if (fmath::sqrt(n) - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!(
                    "camera set: quaternion of frame {i} is not unit length"
                )));
            }
        }
        Ok(())
    }

    pub fn camera(&self, frame: usize) -> Camera {
        Camera {
            focal: self.focals[frame],
            cx: self.cx,
            cy: self.cy,
            rotation: self.rotations[frame],
            center: self.centers[frame],
        }
    }
}

/// A single frame's camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Unit quaternion (x, y, z, w) of the world-to-camera rotation.
    pub rotation: [f64; 4],
    pub center: [f64; 3],
}

/// Per-frame depth grids. Values are non-negative and finite; a value of 0
/// marks a missing pixel (metrics skip it). The optimizer parameterizes
/// depth in log space and materializes positive values here.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSet {
    pub height: usize,
    pub width: usize,
    depths: Vec<Vec<f64>>,
}

impl DepthSet {
    pub fn from_depths(height: usize, width: usize, depths: &[Vec<f64>]) -> Result<Self> {
        for (i, d) in depths.iter().enumerate() {
            if d.len() != height * width {
                return Err(Error::Dimension(format!(
                    "depth set: frame {i} has {} values, expected {}",
                    d.len(),
                    height * width
                )));
            }
            if let Some(bad) = d.iter().position(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::Domain(format!(
                    "depth set: frame {i} pixel {bad} is not a non-negative finite depth"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            depths: depths.to_vec(),
        })
    }

    /// Exponentiate per-frame log-depth grids.
    pub fn from_log(height: usize, width: usize, log_depths: Vec<Vec<f64>>) -> Result<Self> {
        let depths: Vec<Vec<f64>> = log_depths
            .iter()
            .map(|d| d.iter().map(|&v| fmath::exp(v)).collect())
            .collect();
        Self::from_depths(height, width, &depths)
    }

    pub fn frame_count(&self) -> usize {
        self.depths.len()
    }

    pub fn depth_frame(&self, frame: usize) -> &[f64] {
        &self.depths[frame]
    }

    pub fn depth_at(&self, frame: usize, y: usize, x: usize) -> f64 {
        self.depths[frame][y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostOptConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub iterations: usize,
    pub step_size: f64,
    /// Relative best-loss improvement under which the loop stops early.
    pub tol: f64,
}

impl Default for PostOptConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 0.01,
            iterations: 2000,
            step_size: 1e-2,
            tol: 1e-7,
        }
    }
}

impl PostOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(Error::Domain("loss weights must be non-negative".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Domain("iterations must be >= 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Domain("step size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PostOptResult {
    pub cams: CameraSet,
    pub depths: DepthSet,
    /// Combined loss recorded at every iteration (before that iteration's
    /// update).
    pub trace: Vec<f64>,
    /// Set when the input pointmaps had no spatial extent.
    pub degenerate: bool,
}

/// World point of pixel (u, v) at depth `depth` under `cam` (Eq. numbering
/// in the module docs): `R^T (D K^{-1} (u, v, 1)) + o`.
pub fn project_point(cam: &Camera, depth: f64, u: f64, v: f64) -> Result<[f64; 3]> {
    if !(depth > 0.0) {
        return Err(Error::Domain(format!(
            "project_point: depth {depth} must be positive"
        )));
    }
    let dir = [
        depth * (u - cam.cx) / cam.focal,
        depth * (v - cam.cy) / cam.focal,
        depth,
    ];
    let r = rot_from_unit_quat(&cam.rotation);
    // R^T * dir + o
    Ok([
        r[0] * dir[0] + r[3] * dir[1] + r[6] * dir[2] + cam.center[0],
        r[1] * dir[0] + r[4] * dir[1] + r[7] * dir[2] + cam.center[1],
        r[2] * dir[0] + r[5] * dir[1] + r[8] * dir[2] + cam.center[2],
    ])
}

/// Analytic inverse of [`project_point`]: recover (u, v, depth) from a world
/// point.
pub fn invert_projection(cam: &Camera, point: &[f64; 3]) -> Result<(f64, f64, f64)> {
    let r = rot_from_unit_quat(&cam.rotation);
    let d = [
        point[0] - cam.center[0],
        point[1] - cam.center[1],
        point[2] - cam.center[2],
    ];
    // camera-frame point: R * (X - o)
    let cf = [
        r[0] * d[0] + r[1] * d[1] + r[2] * d[2],
        r[3] * d[0] + r[4] * d[1] + r[5] * d[2],
        r[6] * d[0] + r[7] * d[1] + r[8] * d[2],
    ];
    if !(cf[2] > 0.0) {
        return Err(Error::Domain(
            "invert_projection: point lies behind the camera".into(),
        ));
    }
    let u = cam.focal * cf[0] / cf[2] + cam.cx;
    let v = cam.focal * cf[1] / cf[2] + cam.cy;
    Ok((u, v, cf[2]))
}

fn expect_pointmap_shape(observed: &PixelVideo) -> Result<()> {
    if observed.channels != 3 {
        return Err(Error::Dimension(format!(
            "pointmap sequence must have 3 channels, got {}",
            observed.channels
        )));
    }
    if observed.frames == 0 || observed.height == 0 || observed.width == 0 {
        return Err(Error::Domain("pointmap sequence is empty".into()));
    }
    Ok(())
}

/// L1 alignment loss between model points and observed pointmaps, summed
/// over frames and pixels.
pub fn loss_pointmap(cams: &CameraSet, depths: &DepthSet, observed: &PixelVideo) -> Result<f64> {
    expect_pointmap_shape(observed)?;
    let frames = observed.frames;
    if cams.frame_count() != frames || depths.frame_count() != frames {
        return Err(Error::Dimension(format!(
            "loss_pointmap: {frames} observed frames vs {} cameras / {} depth frames",
            cams.frame_count(),
            depths.frame_count()
        )));
    }
    if depths.height != observed.height || depths.width != observed.width {
        return Err(Error::Dimension(format!(
            "loss_pointmap: depth grids are {}x{} but pointmaps are {}x{}",
            depths.height, depths.width, observed.height, observed.width
        )));
    }
    let mut total = 0.0;
    for i in 0..frames {
        let cam = cams.camera(i);
        for y in 0..observed.height {
            for x in 0..observed.width {
                let d = depths.depth_at(i, y, x);
                let p = project_point(&cam, d, x as f64, y as f64)?;
                for ch in 0..3 {
                    total += fmath::abs(p[ch] - observed.at(ch, i, y, x));
                }
            }
        }
    }
    Ok(total)
}

/// Trajectory smoothness: `sum_i ||R_i^T R_{i+1} - I||_F + ||o_{i+1} - o_i||`.
/// Zero for fewer than two frames.
pub fn loss_smooth(cams: &CameraSet) -> f64 {
    let n = cams.frame_count();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n - 1 {
        let ra = rot_from_unit_quat(&cams.rotations[i]);
        let rb = rot_from_unit_quat(&cams.rotations[i + 1]);
        // R_i^T R_{i+1}
        let mut fro = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += ra[k * 3 + r] * rb[k * 3 + c];
                }
                let diff = s - if r == c { 1.0 } else { 0.0 };
                fro += diff * diff;
            }
        }
        total += fmath::sqrt(fro);
        let mut t2 = 0.0;
        for k in 0..3 {
            let d = cams.centers[i + 1][k] - cams.centers[i][k];
            t2 += d * d;
        }
        total += fmath::sqrt(t2);
    }
    total
}

struct FrameParams {
    /// None for the pinned frame 0.
    quat: Option<ParamId>,
    center: Option<ParamId>,
    log_depth: ParamId,
}

struct Problem {
    params: ParamSet,
    /// One focal shared by the whole sequence. Per-frame focals are nearly
    /// unobservable against forward translation (dolly-zoom) on smooth
    /// scenes; a clip comes from one camera, so the model ties them.
    focal: ParamId,
    frames: Vec<FrameParams>,
    /// Per-pixel (u - cx) and (v - cy), row-major, shared by all frames.
    du: Vec<f64>,
    dv: Vec<f64>,
    /// Observed points per frame as row-major P x 3 matrices.
    obs_rows: Vec<Vec<f64>>,
    height: usize,
    width: usize,
    cx: f64,
    cy: f64,
}

impl Problem {
    /// Combined loss on a fresh tape. Returns (loss var, per-tensor vars).
    fn build_loss(&self, alpha1: f64, alpha2: f64) -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let mut vars = Vec::with_capacity(self.params.len());
        for t in self.params.iter() {
            vars.push(tape.param(t.rows, t.cols, &t.value)?);
        }
        let du = tape.constant(self.height * self.width, 1, &self.du)?;
        let dv = tape.constant(self.height * self.width, 1, &self.dv)?;
        let ident_q = tape.constant(1, 4, &IDENTITY_QUAT)?;
        let zero_center = tape.constant(1, 3, &[0.0; 3])?;
        let eye = tape.constant(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?;

        let mut lp: Option<Var> = None;
        let mut rots: Vec<Var> = Vec::with_capacity(self.frames.len());
        let mut centers: Vec<Var> = Vec::with_capacity(self.frames.len());

        let f = vars[self.focal.0];
        for (i, fp) in self.frames.iter().enumerate() {
            let q = match fp.quat {
                Some(id) => vars[id.0],
                None => ident_q,
            };
            let o = match fp.center {
                Some(id) => vars[id.0],
                None => zero_center,
            };
            let rot = tape.quat_to_rot(q)?;
            rots.push(rot);
            centers.push(o);

            let d = vars[fp.log_depth.0];
            let depth = tape.exp(d)?; // P x 1
            let rf = tape.recip(f)?;
            let xs = tape.scale_by(du, rf)?;
            let xs = tape.mul(depth, xs)?;
            let ys = tape.scale_by(dv, rf)?;
            let ys = tape.mul(depth, ys)?;
            let xy = tape.concat_cols(xs, ys)?;
            let cam_pts = tape.concat_cols(xy, depth)?; // P x 3
            let world = tape.matmul(cam_pts, rot)?; // rows * R == (R^T p)^T
            let world = tape.add_row(world, o)?;

            let obs = tape.constant(self.height * self.width, 3, &self.obs_rows[i])?;
            let diff = tape.sub(world, obs)?;
            let a = tape.abs(diff)?;
            let s = tape.sum(a)?;
            lp = Some(match lp {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        let lp = lp.expect("at least one frame");

        let mut loss = tape.mul_scalar(lp, alpha1)?;
        if self.frames.len() >= 2 {
            let mut ls: Option<Var> = None;
            for i in 0..self.frames.len() - 1 {
                let rt = tape.transpose(rots[i])?;
                let rel = tape.matmul(rt, rots[i + 1])?;
                let diff = tape.sub(rel, eye)?;
                let fro = tape.norm2(diff)?;
                let od = tape.sub(centers[i + 1], centers[i])?;
                let on = tape.norm2(od)?;
                let pair = tape.add(fro, on)?;
                ls = Some(match ls {
                    None => pair,
                    Some(acc) => tape.add(acc, pair)?,
                });
            }
            let ls = tape.mul_scalar(ls.expect("two frames"), alpha2)?;
            loss = tape.add(loss, ls)?;
        }
        Ok((tape, loss, vars))
    }

    fn renormalize_quats(&mut self) {
        for fp in &self.frames {
            if let Some(id) = fp.quat {
                let t = self.params.get_mut(id);
                let n = fmath::sqrt(t.value.iter().map(|x| x * x).sum());
                if n > 0.0 {
                    for v in t.value.iter_mut() {
                        *v /= n;
                    }
                }
            }
        }
    }

    /// Exact per-pixel depth update under the current pose and focal: the
    /// scalar L1 cost `sum_c |d*k_c - y_c|` is piecewise linear in d, so its
    /// minimum sits on a breakpoint `y_c / k_c`. The current depth is kept
    /// as a candidate, making this a strict descent step on the alignment
    /// loss (the smoothness term does not involve depth).
    fn refit_depths(&mut self) {
        let hw = self.height * self.width;
        let f = self.params.get(self.focal).value[0];
        for i in 0..self.frames.len() {
            let fp = &self.frames[i];
            let q = match fp.quat {
                Some(id) => {
                    let v = &self.params.get(id).value;
                    [v[0], v[1], v[2], v[3]]
                }
                None => IDENTITY_QUAT,
            };
            let o = match fp.center {
                Some(id) => {
                    let v = &self.params.get(id).value;
                    [v[0], v[1], v[2]]
                }
                None => [0.0; 3],
            };
            let r = rot_from_unit_quat(&q);
            let obs = &self.obs_rows[i];
            let mut new_log = self.params.get(fp.log_depth).value.clone();
            for p in 0..hw {
                let k = [self.du[p] / f, self.dv[p] / f, 1.0];
                let xt = [obs[p * 3] - o[0], obs[p * 3 + 1] - o[1], obs[p * 3 + 2] - o[2]];
                // camera-frame target y = R (X - o)
                let y = [
                    r[0] * xt[0] + r[1] * xt[1] + r[2] * xt[2],
                    r[3] * xt[0] + r[4] * xt[1] + r[5] * xt[2],
                    r[6] * xt[0] + r[7] * xt[1] + r[8] * xt[2],
                ];
                let cost = |d: f64| {
                    fmath::abs(d * k[0] - y[0])
                        + fmath::abs(d * k[1] - y[1])
                        + fmath::abs(d * k[2] - y[2])
                };
                let mut best_d = fmath::exp(new_log[p]);
                let mut best_c = cost(best_d);
                for c in 0..3 {
                    if fmath::abs(k[c]) > 1e-12 {
                        let cand = y[c] / k[c];
                        if cand > 1e-9 {
                            let cc = cost(cand);
                            if cc < best_c {
                                best_c = cc;
                                best_d = cand;
                            }
                        }
                    }
                }
                new_log[p] = fmath::ln(best_d);
            }
            self.params.get_mut(fp.log_depth).value = new_log;
        }
    }

    /// Exact per-frame focal update under the current pose and depths. With
    /// `g = 1/f` the alignment residuals in x and y are `|a*g - y|` with
    /// `a = d * (u - c)`, so the optimal g is a weighted median of `y / a`
    /// with weights `|a|`.
    fn refit_focal(&mut self) {
        let hw = self.height * self.width;
        let mut cands: Vec<(f64, f64)> = Vec::with_capacity(2 * hw * self.frames.len());
        let mut total_w = 0.0;
        for i in 0..self.frames.len() {
            let fp = &self.frames[i];
            let q = match fp.quat {
                Some(id) => {
                    let v = &self.params.get(id).value;
                    [v[0], v[1], v[2], v[3]]
                }
                None => IDENTITY_QUAT,
            };
            let o = match fp.center {
                Some(id) => {
                    let v = &self.params.get(id).value;
                    [v[0], v[1], v[2]]
                }
                None => [0.0; 3],
            };
            let r = rot_from_unit_quat(&q);
            let obs = &self.obs_rows[i];
            let logd = &self.params.get(fp.log_depth).value;
            for p in 0..hw {
                let d = fmath::exp(logd[p]);
                let xt = [obs[p * 3] - o[0], obs[p * 3 + 1] - o[1], obs[p * 3 + 2] - o[2]];
                let y = [
                    r[0] * xt[0] + r[1] * xt[1] + r[2] * xt[2],
                    r[3] * xt[0] + r[4] * xt[1] + r[5] * xt[2],
                ];
                for (c, &dk) in [self.du[p], self.dv[p]].iter().enumerate() {
                    let a = d * dk;
                    if fmath::abs(a) > 1e-9 {
                        cands.push((y[c] / a, fmath::abs(a)));
                        total_w += fmath::abs(a);
                    }
                }
            }
        }
        if cands.is_empty() {
            return;
        }
        cands.sort_unstable_by(|x, y| x.0.partial_cmp(&y.0).expect("finite"));
        let mut acc = 0.0;
        let mut g = cands[cands.len() - 1].0;
        for &(value, w) in &cands {
            acc += w;
            if acc >= 0.5 * total_w {
                g = value;
                break;
            }
        }
        if g > 1e-9 {
            self.params.get_mut(self.focal).value[0] = 1.0 / g;
        }
    }

    /// Exact per-frame center update under the current rotation, focal, and
    /// depths: the alignment loss is coordinate-separable in `o`, so each
    /// coordinate's minimizer is the median of the per-pixel implied
    /// centers `X - R^T (d k)`. Frame 0 stays pinned.
    fn refit_centers(&mut self) {
        let hw = self.height * self.width;
        for i in 0..self.frames.len() {
            let fp = &self.frames[i];
            let Some(center_id) = fp.center else { continue };
            let f = self.params.get(self.focal).value[0];
            let q = match fp.quat {
                Some(id) => {
                    let v = &self.params.get(id).value;
                    [v[0], v[1], v[2], v[3]]
                }
                None => IDENTITY_QUAT,
            };
            let r = rot_from_unit_quat(&q);
            let obs = &self.obs_rows[i];
            let logd = &self.params.get(fp.log_depth).value;
            let mut implied = [
                Vec::with_capacity(hw),
                Vec::with_capacity(hw),
                Vec::with_capacity(hw),
            ];
            for p in 0..hw {
                let d = fmath::exp(logd[p]);
                let k = [d * self.du[p] / f, d * self.dv[p] / f, d];
                // world offset R^T (d k)
                let w = [
                    r[0] * k[0] + r[3] * k[1] + r[6] * k[2],
                    r[1] * k[0] + r[4] * k[1] + r[7] * k[2],
                    r[2] * k[0] + r[5] * k[1] + r[8] * k[2],
                ];
                for c in 0..3 {
                    implied[c].push(obs[p * 3 + c] - w[c]);
                }
            }
            let mut o = [0.0; 3];
            for c in 0..3 {
                implied[c].sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
                let n = implied[c].len();
                o[c] = if n % 2 == 1 {
                    implied[c][n / 2]
                } else {
                    0.5 * (implied[c][n / 2 - 1] + implied[c][n / 2])
                };
            }
            self.params.get_mut(center_id).value = o.to_vec();
        }
    }

    fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|t| t.value.clone()).collect()
    }

    fn restore(&mut self, snap: &[Vec<f64>]) {
        for (t, s) in self.params.iter_mut().zip(snap) {
            t.value.copy_from_slice(s);
        }
    }

    fn materialize(&self, frames: usize) -> Result<(CameraSet, DepthSet)> {
        let mut focals = Vec::with_capacity(frames);
        let mut rotations = Vec::with_capacity(frames);
        let mut centers = Vec::with_capacity(frames);
        let mut logs = Vec::with_capacity(frames);
        let f = self.params.get(self.focal).value[0];
        for fp in &self.frames {
            focals.push(f);
            match fp.quat {
                Some(id) => {
                    let q = &self.params.get(id).value;
                    let n = fmath::sqrt(q.iter().map(|x| x * x).sum());
                    rotations.push([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
                }
                None => rotations.push(IDENTITY_QUAT),
            }
            match fp.center {
                Some(id) => {
                    let o = &self.params.get(id).value;
                    centers.push([o[0], o[1], o[2]]);
                }
                None => centers.push([0.0; 3]),
            }
            logs.push(self.params.get(fp.log_depth).value.clone());
        }
        let cams = CameraSet {
            focals,
            cx: self.cx,
            cy: self.cy,
            rotations,
            centers,
        };
        let depths = DepthSet::from_log(self.height, self.width, logs)?;
        Ok((cams, depths))
    }
}

/// Closed-form focal estimate from frame-0 points assuming the pinned
/// identity pose: least squares of pixel offsets against ray slopes.
fn estimate_focal(observed: &PixelVideo, cx: f64, cy: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 0..observed.height {
        for x in 0..observed.width {
            let px = observed.at(0, 0, y, x);
            let py = observed.at(1, 0, y, x);
            let pz = observed.at(2, 0, y, x);
            if pz <= 1e-12 {
                continue;
            }
            let (sx, sy) = (px / pz, py / pz);
            num += (x as f64 - cx) * sx + (y as f64 - cy) * sy;
            den += sx * sx + sy * sy;
        }
    }
    let fallback = observed.width.max(observed.height) as f64;
    if den > 1e-12 && num / den > 1e-6 {
        num / den
    } else {
        fallback
    }
}

fn centroid(observed: &PixelVideo, frame: usize) -> [f64; 3] {
    let hw = observed.height * observed.width;
    let per_channel = observed.frames * hw;
    let mut c = [0.0; 3];
    for ch in 0..3 {
        let src = &observed.data[ch * per_channel + frame * hw..ch * per_channel + (frame + 1) * hw];
        c[ch] = src.iter().sum::<f64>() / hw as f64;
    }
    c
}

fn build_problem(observed: &PixelVideo) -> Result<Problem> {
    let (h, w) = (observed.height, observed.width);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let f0 = estimate_focal(observed, cx, cy);
    let c0 = centroid(observed, 0);

    let mut params = ParamSet::new();
    let focal = params.add("focal", 1, 1, vec![f0])?;
    let mut frames = Vec::with_capacity(observed.frames);
    for i in 0..observed.frames {
        let (quat, center) = if i == 0 {
            (None, None)
        } else {
            let q = params.add(&format!("q{i:03}"), 1, 4, IDENTITY_QUAT.to_vec())?;
            let ci = centroid(observed, i);
            let o = params.add(
                &format!("o{i:03}"),
                1,
                3,
                vec![ci[0] - c0[0], ci[1] - c0[1], ci[2] - c0[2]],
            )?;
            (Some(q), Some(o))
        };
        // range-based depth init: log of the distance to the origin
        let hw = h * w;
        let per_channel = observed.frames * hw;
        let mut logd = Vec::with_capacity(hw);
        for p in 0..hw {
            let mut r2 = 0.0;
            for ch in 0..3 {
                let v = observed.data[ch * per_channel + i * hw + p];
                r2 += v * v;
            }
            logd.push(fmath::ln(fmath::sqrt(r2).max(1e-6)));
        }
        let log_depth = params.add(&format!("d{i:03}"), hw, 1, logd)?;
        frames.push(FrameParams {
            quat,
            center,
            log_depth,
        });
    }

    let mut du = Vec::with_capacity(h * w);
    let mut dv = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            du.push(x as f64 - cx);
            dv.push(y as f64 - cy);
        }
    }
    let hw = h * w;
    let per_channel = observed.frames * hw;
    let mut obs_rows = Vec::with_capacity(observed.frames);
    for i in 0..observed.frames {
        let mut obs = vec![0.0; hw * 3];
        for ch in 0..3 {
            let src = &observed.data[ch * per_channel + i * hw..ch * per_channel + (i + 1) * hw];
            for (p, &v) in src.iter().enumerate() {
                obs[p * 3 + ch] = v;
            }
        }
        obs_rows.push(obs);
    }
    Ok(Problem {
        params,
        focal,
        frames,
        du,
        dv,
        obs_rows,
        height: h,
        width: w,
        cx,
        cy,
    })
}

/// Gradient-based minimization of `alpha1 * L_p + alpha2 * L_s`. Runs the
/// adaptive-moment optimizer in three stages with decreasing step sizes
/// (step, step/10, step/100) to settle the non-smooth L1 objective, returns
/// the best parameters seen, and stops early once the best loss stops
/// improving by the relative tolerance.
pub fn optimize(observed: &PixelVideo, cfg: &PostOptConfig) -> Result<PostOptResult> {
    cfg.validate()?;
    expect_pointmap_shape(observed)?;
    let frames = observed.frames;

    // degenerate input: no extent at all
    let lo = observed.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = observed
        .data
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi - lo > 1e-12);

    let mut problem = build_problem(observed)?;
    if degenerate {
        let (cams, depths) = problem.materialize(frames)?;
        return Ok(PostOptResult {
            cams,
            depths,
            trace: Vec::new(),
            degenerate: true,
        });
    }

    let stages = [
        (cfg.iterations / 2, cfg.step_size),
        (cfg.iterations * 3 / 10, cfg.step_size / 10.0),
        (
            cfg.iterations - cfg.iterations / 2 - cfg.iterations * 3 / 10,
            cfg.step_size / 100.0,
        ),
    ];

    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best_loss = f64::INFINITY;
    let mut best: Vec<Vec<f64>> = problem.snapshot();
    let mut iteration = 0usize;

    'outer: for (stage, &(count, lr)) in stages.iter().enumerate() {
        let final_stage = stage + 1 == stages.len();
        let opt = OptimConfig::with_step_size(lr);
        // iterations since the best loss improved by at least tol, relative
        let mut stale = 0usize;
        for _ in 0..count {
            let (tape, loss_var, vars) = problem
                .build_loss(cfg.alpha1, cfg.alpha2)
                .map_err(|e| iteration_err(e, iteration))?;
            let loss = tape.scalar_value(loss_var);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "post-optimization diverged at iteration {iteration}"
                )));
            }
            trace.push(loss);
            if loss < best_loss {
                let improvement = (best_loss - loss) / best_loss.max(1e-30);
                best_loss = loss;
                best = problem.snapshot();
                stale = if improvement >= cfg.tol { 0 } else { stale + 1 };
            } else {
                stale += 1;
            }
            // the coarse stages always run to completion; only the final
            // polish stage may stop once progress stalls
            if best_loss == 0.0 || (final_stage && stale > 200) {
                break 'outer;
            }

            let grads = tape
                .backward(loss_var)
                .map_err(|e| iteration_err(e, iteration))?;
            problem.params.zero_grad();
            for (i, var) in vars.iter().enumerate() {
                if let Some(g) = grads.get(*var) {
                    problem.params.get_mut(ParamId(i)).grad.copy_from_slice(g);
                }
            }
            problem
                .params
                .adam_step(&opt)
                .map_err(|e| iteration_err(e, iteration))?;
            problem.renormalize_quats();
            iteration += 1;
            if iteration % REFIT_EVERY == 0 {
                for _ in 0..2 {
                    problem.refit_depths();
                    problem.refit_centers();
                    problem.refit_focal();
                }
                problem.refit_depths();
            }
        }
    }

    problem.restore(&best);
    let (cams, depths) = problem.materialize(frames)?;
    Ok(PostOptResult {
        cams,
        depths,
        trace,
        degenerate: false,
    })
}

fn iteration_err(e: Error, iteration: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("iteration {iteration}: {m}")),
        other => other,
    }
}
