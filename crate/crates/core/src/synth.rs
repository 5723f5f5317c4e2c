//! Procedural ground-truth scenes: smooth camera paths over a bumpy depth
//! field, rendered into pointmaps that close exactly under the projection
//! model. Used as the oracle for recovery, metric, and overfit tests.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::grids::PixelVideo;
use crate::postopt::{project_point, CameraSet, DepthSet, IDENTITY_QUAT};
use crate::rng::{self, Rng};

/// Ground-truth cameras, depths, and the pointmaps they render to.
#[derive(Clone, Debug)]
pub struct SceneTruth {
    pub cams: CameraSet,
    pub depths: DepthSet,
    pub pointmaps: PixelVideo,
    pub seed: u64,
}

const DEPTH_MIN: f64 = 0.5;
const DEPTH_MAX: f64 = 5.0;
const MAX_TOTAL_ROTATION: f64 = 30.0 * core::f64::consts::PI / 180.0;

fn unit_quat(axis: [f64; 3], angle: f64) -> [f64; 4] {
    let n = fmath::sqrt(axis.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
    let s = fmath::sin(angle / 2.0) / n;
    [
        axis[0] * s,
        axis[1] * s,
        axis[2] * s,
        fmath::cos(angle / 2.0),
    ]
}

/// Deterministic scene generation: sinusoidal center drift of bounded
/// magnitude, a small-angle rotation ramp (total under 30 degrees so every
/// pixel stays front-facing), and a smooth positive depth field of at most
/// eight low-frequency bumps over a base plane at 2.0, clamped to
/// [0.5, 5.0]. Frame 0 is the identity pose.
pub fn make_scene(seed: u64, frames: usize, height: usize, width: usize) -> Result<SceneTruth> {
    if frames < 1 {
        return Err(Error::Domain("make_scene: need at least one frame".into()));
    }
    if height < 4 || width < 4 {
        return Err(Error::Domain(format!(
            "make_scene: grid {height}x{width} below the 4x4 minimum"
        )));
    }
    let mut r = rng::from_seed(seed);

    let focal = width as f64 * (0.8 + 0.4 * r.gen::<f64>());
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;

    // rotation ramp about a fixed random axis
    let axis_raw = rng::normal_vec(&mut r, 3);
    let axis = [axis_raw[0], axis_raw[1], axis_raw[2]];
    let total_angle = MAX_TOTAL_ROTATION * (0.3 + 0.7 * r.gen::<f64>());

    // sinusoidal drift, zeroed at frame 0
    let amp: Vec<f64> = (0..3).map(|_| 0.1 + 0.3 * r.gen::<f64>()).collect();
    let omega: Vec<f64> = (0..3).map(|_| 0.2 + 0.6 * r.gen::<f64>()).collect();
    let phase: Vec<f64> = (0..3).map(|_| core::f64::consts::TAU * r.gen::<f64>()).collect();
    let drift = |k: usize, i: f64| amp[k] * (fmath::sin(omega[k] * i + phase[k]) - fmath::sin(phase[k]));

    let mut rotations = Vec::with_capacity(frames);
    let mut centers = Vec::with_capacity(frames);
    for i in 0..frames {
        let s = if frames > 1 {
            i as f64 / (frames - 1) as f64
        } else {
            0.0
        };
        rotations.push(if i == 0 {
            IDENTITY_QUAT
        } else {
            unit_quat(axis, total_angle * s)
        });
        centers.push(if i == 0 {
            [0.0; 3]
        } else {
            [
                drift(0, i as f64),
                drift(1, i as f64),
                drift(2, i as f64),
            ]
        });
    }
    let cams = CameraSet {
        focals: vec![focal; frames],
        cx,
        cy,
        rotations,
        centers,
    };

    // band-limited depth bumps (up to 8 sinusoids), shared field drifting
    // slowly over frames
    let n_bumps = 4 + (r.gen::<u64>() % 5) as usize; // 4..=8
    let mut bumps = Vec::with_capacity(n_bumps);
    for _ in 0..n_bumps {
        let a = 0.05 + 0.15 * r.gen::<f64>();
        let fx = 0.05 + 0.25 * r.gen::<f64>();
        let fy = 0.05 + 0.25 * r.gen::<f64>();
        let ft = 0.05 + 0.20 * r.gen::<f64>();
        let ph = core::f64::consts::TAU * r.gen::<f64>();
        bumps.push((a, fx, fy, ft, ph));
    }
    let mut depth_frames = Vec::with_capacity(frames);
    for i in 0..frames {
        let mut d = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let mut v = 2.0;
                for &(a, fx, fy, ft, ph) in &bumps {
                    v += a * fmath::sin(fx * x as f64 + fy * y as f64 + ft * i as f64 + ph);
                }
                d.push(v.clamp(DEPTH_MIN, DEPTH_MAX));
            }
        }
        depth_frames.push(d);
    }
    let depths = DepthSet::from_depths(height, width, &depth_frames)?;

    // render pointmaps via the exact projection
    let mut pointmaps = PixelVideo::zeros(3, frames, height, width);
    for i in 0..frames {
        let cam = cams.camera(i);
        for y in 0..height {
            for x in 0..width {
                let p = project_point(&cam, depths.depth_at(i, y, x), x as f64, y as f64)?;
                for ch in 0..3 {
                    pointmaps.set(ch, i, y, x, p[ch]);
                }
            }
        }
    }

    Ok(SceneTruth {
        cams,
        depths,
        pointmaps,
        seed,
    })
}

/// Pointmaps plus element-wise Gaussian noise of standard deviation `sigma`.
pub fn perturb(scene: &SceneTruth, sigma: f64, seed: u64) -> Result<PixelVideo> {
    if sigma < 0.0 {
        return Err(Error::Domain(format!(
            "perturb: sigma {sigma} must be non-negative"
        )));
    }
    let mut out = scene.pointmaps.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut r = rng::from_seed(seed);
    for v in out.data.iter_mut() {
        let n: f64 = r.sample(rand_distr::StandardNormal);
        *v += sigma * n;
    }
    Ok(out)
}

/// Deterministic RGB video derived from a scene's pointmaps: smooth, pixel
/// aligned with the geometry, and bounded to [-1, 1]. Stands in for real
/// appearance so training clips have both modalities.
pub fn synthetic_rgb(scene: &SceneTruth) -> PixelVideo {
    let pm = &scene.pointmaps;
    // decorrelate the color stream from the geometry stream
    let mut r = rng::from_seed(scene.seed ^ 0x9e37_79b9_7f4a_7c15);
    let coeffs: Vec<f64> = (0..12).map(|_| 0.4 + 1.2 * r.gen::<f64>()).collect();
    let mut rgb = PixelVideo::zeros(3, pm.frames, pm.height, pm.width);
    for fr in 0..pm.frames {
        for y in 0..pm.height {
            for x in 0..pm.width {
                let p = [pm.at(0, fr, y, x), pm.at(1, fr, y, x), pm.at(2, fr, y, x)];
                for ch in 0..3 {
                    let a = coeffs[ch * 4];
                    let b = coeffs[ch * 4 + 1];
                    let c = coeffs[ch * 4 + 2];
                    let ph = coeffs[ch * 4 + 3];
                    let v = fmath::sin(a * p[0] + b * p[1] + c * p[2] + ph);
                    rgb.set(ch, fr, y, x, v);
                }
            }
        }
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postopt;

    #[test]
    fn deterministic_in_seed() {
        let a = make_scene(7, 4, 8, 8).unwrap();
        let b = make_scene(7, 4, 8, 8).unwrap();
        assert_eq!(a.pointmaps, b.pointmaps);
        assert_eq!(a.cams, b.cams);
        assert_eq!(a.depths, b.depths);
        let c = make_scene(8, 4, 8, 8).unwrap();
        assert_ne!(a.pointmaps, c.pointmaps);
    }

    #[test]
    fn single_frame_z_channel_is_depth() {
        let s = make_scene(3, 1, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let z = s.pointmaps.at(2, 0, y, x);
                let d = s.depths.depth_at(0, y, x);
                assert_eq!(z.to_bits(), d.to_bits());
            }
        }
    }

    /// Eq-closure: re-projecting with the scene's own cameras and depths
    /// reproduces the stored pointmaps with zero error.
    #[test]
    fn projection_closure_is_exact() {
        let s = make_scene(11, 5, 8, 12).unwrap();
        for i in 0..5 {
            let cam = s.cams.camera(i);
            for y in 0..8 {
                for x in 0..12 {
                    let p =
                        postopt::project_point(&cam, s.depths.depth_at(i, y, x), x as f64, y as f64)
                            .unwrap();
                    for ch in 0..3 {
                        assert_eq!(p[ch].to_bits(), s.pointmaps.at(ch, i, y, x).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn depth_bounds_hold() {
        for seed in 0..5 {
            let s = make_scene(seed, 3, 8, 8).unwrap();
            for i in 0..3 {
                for &d in s.depths.depth_frame(i).iter() {
                    assert!((DEPTH_MIN..=DEPTH_MAX).contains(&d));
                }
            }
        }
    }

    #[test]
    fn frame_zero_pose_is_identity() {
        let s = make_scene(9, 6, 8, 8).unwrap();
        assert_eq!(s.cams.rotations[0], IDENTITY_QUAT);
        assert_eq!(s.cams.centers[0], [0.0; 3]);
        s.cams.validate().unwrap();
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let s = make_scene(2, 3, 8, 8).unwrap();
        let p = perturb(&s, 0.0, 5).unwrap();
        assert_eq!(p, s.pointmaps);
        assert!(perturb(&s, -0.1, 5).is_err());
    }

    #[test]
    fn perturb_noise_statistics() {
        // sample std within 5% of sigma over >= 1e5 elements
        let s = make_scene(4, 16, 48, 48).unwrap(); // 3*16*48*48 = 110k elements
        let sigma = 0.01;
        let p = perturb(&s, sigma, 77).unwrap();
        let n = p.data.len();
        assert!(n >= 100_000, "{n}");
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for (a, b) in p.data.iter().zip(s.pointmaps.data.iter()) {
            let d = a - b;
            sum += d;
            sumsq += d * d;
        }
        let mean = sum / n as f64;
        let std = fmath::sqrt(sumsq / n as f64 - mean * mean);
        assert!((std - sigma).abs() / sigma < 0.05, "std {std}");
    }

    #[test]
    fn rgb_is_bounded_and_deterministic() {
        let s = make_scene(6, 3, 8, 8).unwrap();
        let a = synthetic_rgb(&s);
        let b = synthetic_rgb(&s);
        assert_eq!(a, b);
        assert!(a.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert_eq!(a.shape(), (3, 3, 8, 8));
    }

    #[test]
    fn rejects_tiny_grids() {
        assert!(make_scene(1, 0, 8, 8).is_err());
        assert!(make_scene(1, 2, 3, 8).is_err());
        assert!(make_scene(1, 2, 8, 3).is_err());
    }
}
