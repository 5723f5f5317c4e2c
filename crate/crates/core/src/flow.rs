//! Rectified-flow noising, velocity targets, the training loss, and Euler
//! sampling with classifier-free guidance.
//!
//! Time convention: `t = 0` is pure noise and `t = 1` is clean data. The
//! noisy latent is `z_t = t*z + (1-t)*eps` and the supervised velocity is
//! `v = z - eps`, the exact t-derivative of the path.

use alloc::format;

use crate::error::{Error, Result};
use crate::grids::LatentGrid;
use crate::rng;

/// One training sample of the linear noise-to-data path.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub t: f64,
    pub noise: LatentGrid,
    pub noisy: LatentGrid,
    pub velocity: LatentGrid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 6.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Domain("sampler steps must be >= 1".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Domain(format!(
                "cfg_scale must be >= 0, got {}",
                self.cfg_scale
            )));
        }
        Ok(())
    }
}

/// Latent-resolution conditioning: encoded conditioning video plus the
/// latent-resolution frame mask. The unconditional guidance pass zeroes both.
#[derive(Clone, Debug)]
pub struct LatentCondition {
    pub z_c: LatentGrid,
    pub mask: LatentGrid,
}

impl LatentCondition {
    pub fn zeroed_like(other: &Self) -> Self {
        Self {
            z_c: other.z_c.zeros_like(),
            mask: other.mask.zeros_like(),
        }
    }
}

/// A dual-branch velocity predictor: given the two noisy latents, the
/// conditioning, and the time, produce one velocity per modality.
pub trait VelocityModel {
    fn velocity(
        &self,
        z_rgb_t: &LatentGrid,
        z_xyz_t: &LatentGrid,
        cond: &LatentCondition,
        t: f64,
    ) -> Result<(LatentGrid, LatentGrid)>;
}

fn check_same_shape(a: &LatentGrid, b: &LatentGrid, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `t*z + (1-t)*eps`, element-wise.
pub fn noise_latent(z: &LatentGrid, eps: &LatentGrid, t: f64) -> Result<LatentGrid> {
    check_same_shape(z, eps, "noise_latent")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("noise_latent: t = {t} outside [0, 1]")));
    }
    let mut out = z.clone();
    for (o, (&zv, &ev)) in out.data.iter_mut().zip(z.data.iter().zip(eps.data.iter())) {
        *o = t * zv + (1.0 - t) * ev;
    }
    Ok(out)
}

/// `z - eps`, element-wise: the constant velocity of the linear path.
pub fn velocity_target(z: &LatentGrid, eps: &LatentGrid) -> Result<LatentGrid> {
    check_same_shape(z, eps, "velocity_target")?;
    let mut out = z.clone();
    for (o, &ev) in out.data.iter_mut().zip(eps.data.iter()) {
        *o -= ev;
    }
    Ok(out)
}

/// Noisy latent and velocity target for one modality at time `t`.
pub fn flow_sample(z: &LatentGrid, noise: LatentGrid, t: f64) -> Result<FlowSample> {
    let noisy = noise_latent(z, &noise, t)?;
    let velocity = velocity_target(z, &noise)?;
    Ok(FlowSample {
        t,
        noise,
        noisy,
        velocity,
    })
}

/// Mean-squared velocity error summed over the two modalities, equally
/// weighted.
pub fn fm_loss(
    v_pred_rgb: &LatentGrid,
    v_tgt_rgb: &LatentGrid,
    v_pred_xyz: &LatentGrid,
    v_tgt_xyz: &LatentGrid,
) -> Result<f64> {
    check_same_shape(v_pred_rgb, v_tgt_rgb, "fm_loss rgb")?;
    check_same_shape(v_pred_xyz, v_tgt_xyz, "fm_loss xyz")?;
    if v_pred_rgb.is_empty() || v_pred_xyz.is_empty() {
        return Err(Error::Domain("fm_loss: empty velocity grid".into()));
    }
    let mse = |a: &LatentGrid, b: &LatentGrid| {
        let s: f64 = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        s / a.len() as f64
    };
    Ok(mse(v_pred_rgb, v_tgt_rgb) + mse(v_pred_xyz, v_tgt_xyz))
}

/// The seeded starting noise used by [`sample`]: RGB first, then XYZ, from
/// one ChaCha stream. Public so tests can reproduce the sampler's start.
pub fn init_noise(
    shape_rgb: (usize, usize, usize, usize),
    shape_xyz: (usize, usize, usize, usize),
    seed: u64,
) -> (LatentGrid, LatentGrid) {
    let mut r = rng::from_seed(seed);
    let (c, f, h, w) = shape_rgb;
    let rgb = LatentGrid {
        channels: c,
        frames: f,
        height: h,
        width: w,
        data: rng::normal_vec(&mut r, c * f * h * w),
    };
    let (c, f, h, w) = shape_xyz;
    let xyz = LatentGrid {
        channels: c,
        frames: f,
        height: h,
        width: w,
        data: rng::normal_vec(&mut r, c * f * h * w),
    };
    (rgb, xyz)
}

/// Euler integration of `dz/dt = v` from seeded noise at `t = 0` to `t = 1`,
/// with classifier-free guidance `v_u + s*(v_c - v_u)` per modality. The
/// unconditional pass zeroes the conditioning latents and mask.
pub fn sample(
    model: &dyn VelocityModel,
    cond: &LatentCondition,
    cfg: &SamplerConfig,
) -> Result<(LatentGrid, LatentGrid)> {
    cfg.validate()?;
    let shape = cond.z_c.shape();
    let (mut z_rgb, mut z_xyz) = init_noise(shape, shape, cfg.seed);
    let uncond = LatentCondition::zeroed_like(cond);
    let dt = 1.0 / cfg.steps as f64;

    for k in 0..cfg.steps {
        let t = k as f64 * dt;
        let (vc_rgb, vc_xyz) = model.velocity(&z_rgb, &z_xyz, cond, t)?;
        check_same_shape(&vc_rgb, &z_rgb, "sample: conditional rgb velocity")?;
        check_same_shape(&vc_xyz, &z_xyz, "sample: conditional xyz velocity")?;
        let (vu_rgb, vu_xyz) = model.velocity(&z_rgb, &z_xyz, &uncond, t)?;
        check_same_shape(&vu_rgb, &z_rgb, "sample: unconditional rgb velocity")?;
        check_same_shape(&vu_xyz, &z_xyz, "sample: unconditional xyz velocity")?;

        let s = cfg.cfg_scale;
        let guide = |zc: &mut LatentGrid, vc: &LatentGrid, vu: &LatentGrid| -> Result<()> {
            for (z, (&c, &u)) in zc.data.iter_mut().zip(vc.data.iter().zip(vu.data.iter())) {
                let v = u + s * (c - u);
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite guided velocity at sampler step {k}"
                    )));
                }
                *z += dt * v;
            }
            Ok(())
        };
        guide(&mut z_rgb, &vc_rgb, &vu_rgb)?;
        guide(&mut z_xyz, &vc_xyz, &vu_xyz)?;
    }
    Ok((z_rgb, z_xyz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::LatentGrid;
    use alloc::vec;
    use alloc::vec::Vec;

    fn grid(data: Vec<f64>) -> LatentGrid {
        LatentGrid::new(1, 1, 1, data.len(), data).unwrap()
    }

    fn random_grid(shape: (usize, usize, usize, usize), seed: u64) -> LatentGrid {
        let (c, f, h, w) = shape;
        let mut r = rng::from_seed(seed);
        LatentGrid::new(c, f, h, w, rng::normal_vec(&mut r, c * f * h * w)).unwrap()
    }

    #[test]
    fn endpoints_are_exact() {
        let z = random_grid((2, 2, 2, 2), 1);
        let e = random_grid((2, 2, 2, 2), 2);
        assert_eq!(noise_latent(&z, &e, 1.0).unwrap(), z);
        assert_eq!(noise_latent(&z, &e, 0.0).unwrap(), e);
    }

    #[test]
    fn scalar_midpoint() {
        let z = grid(vec![2.0]);
        let e = grid(vec![0.0]);
        assert_eq!(noise_latent(&z, &e, 0.5).unwrap().data, vec![1.0]);
    }

    #[test]
    fn t_domain_enforced() {
        let z = grid(vec![0.0]);
        assert!(matches!(
            noise_latent(&z, &z, 1.5),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            noise_latent(&z, &z, -0.1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = grid(vec![0.0, 1.0]);
        let b = grid(vec![0.0]);
        assert!(matches!(noise_latent(&a, &b, 0.5), Err(Error::Dimension(_))));
        assert!(matches!(velocity_target(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn velocity_target_simple_cases() {
        let z = grid(vec![1.0, 1.0, 1.0]);
        let zero = grid(vec![0.0, 0.0, 0.0]);
        assert_eq!(velocity_target(&z, &z).unwrap().data, vec![0.0, 0.0, 0.0]);
        assert_eq!(velocity_target(&z, &zero).unwrap().data, vec![1.0, 1.0, 1.0]);
    }

    /// The velocity target equals the central-difference t-derivative of the
    /// noising path.
    #[test]
    fn velocity_is_derivative_of_path() {
        let z = random_grid((3, 2, 4, 4), 10);
        let e = random_grid((3, 2, 4, 4), 11);
        let v = velocity_target(&z, &e).unwrap();
        let d = 1e-4;
        let t = 0.37;
        let plus = noise_latent(&z, &e, t + d).unwrap();
        let minus = noise_latent(&z, &e, t - d).unwrap();
        for i in 0..v.len() {
            let fd = (plus.data[i] - minus.data[i]) / (2.0 * d);
            assert!((fd - v.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn fm_loss_cases() {
        let z = random_grid((2, 1, 2, 2), 3);
        let zero = z.zeros_like();
        // predictions equal targets -> 0
        assert_eq!(fm_loss(&z, &z, &zero, &zero).unwrap(), 0.0);
        // rgb off by constant 1, xyz exact -> 1.0
        let mut off = z.clone();
        for v in &mut off.data {
            *v += 1.0;
        }
        let l = fm_loss(&off, &z, &zero, &zero).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fm_loss_matches_scalar_loop_oracle() {
        let a = random_grid((2, 2, 2, 2), 20);
        let b = random_grid((2, 2, 2, 2), 21);
        let c = random_grid((2, 2, 2, 2), 22);
        let d = random_grid((2, 2, 2, 2), 23);
        let got = fm_loss(&a, &b, &c, &d).unwrap();
        let mut s1 = 0.0;
        for i in 0..a.len() {
            let diff = a.data[i] - b.data[i];
            s1 += diff * diff;
        }
        let mut s2 = 0.0;
        for i in 0..c.len() {
            let diff = c.data[i] - d.data[i];
            s2 += diff * diff;
        }
        let oracle = s1 / a.len() as f64 + s2 / c.len() as f64;
        assert!((got - oracle).abs() < 1e-7);
    }

    /// Model with constant velocity; Euler is exact on it for any step count.
    struct ConstantVelocity {
        v_rgb: LatentGrid,
        v_xyz: LatentGrid,
    }

    impl VelocityModel for ConstantVelocity {
        fn velocity(
            &self,
            _z_rgb_t: &LatentGrid,
            _z_xyz_t: &LatentGrid,
            _cond: &LatentCondition,
            _t: f64,
        ) -> Result<(LatentGrid, LatentGrid)> {
            Ok((self.v_rgb.clone(), self.v_xyz.clone()))
        }
    }

    fn toy_condition(shape: (usize, usize, usize, usize)) -> LatentCondition {
        let (c, f, h, w) = shape;
        LatentCondition {
            z_c: random_grid((c, f, h, w), 77),
            mask: LatentGrid::zeros(1, f, h, w),
        }
    }

    #[test]
    fn constant_velocity_sampler_is_exact() {
        let shape = (2, 2, 2, 2);
        let seed = 9;
        for &steps in &[1usize, 7, 50] {
            let target = random_grid(shape, 40);
            let (e_rgb, e_xyz) = init_noise(shape, shape, seed);
            let v_rgb = velocity_target(&target, &e_rgb).unwrap();
            let v_xyz = velocity_target(&target, &e_xyz).unwrap();
            let model = ConstantVelocity { v_rgb, v_xyz };
            let cfg = SamplerConfig {
                steps,
                cfg_scale: 1.0,
                seed,
            };
            let (z_rgb, z_xyz) = sample(&model, &toy_condition(shape), &cfg).unwrap();
            for i in 0..z_rgb.len() {
                assert!(
                    (z_rgb.data[i] - target.data[i]).abs() < 1e-12,
                    "steps {steps}"
                );
                assert!((z_xyz.data[i] - target.data[i]).abs() < 1e-12);
            }
        }
    }

    /// A model whose velocity depends on the conditioning, to exercise CFG.
    struct CondSensitive;

    impl VelocityModel for CondSensitive {
        fn velocity(
            &self,
            z_rgb_t: &LatentGrid,
            z_xyz_t: &LatentGrid,
            cond: &LatentCondition,
            t: f64,
        ) -> Result<(LatentGrid, LatentGrid)> {
            let mut v_rgb = z_rgb_t.zeros_like();
            for (o, (&z, &c)) in v_rgb
                .data
                .iter_mut()
                .zip(z_rgb_t.data.iter().zip(cond.z_c.data.iter()))
            {
                *o = 0.3 * z + 0.7 * c + 0.1 * t;
            }
            let mut v_xyz = z_xyz_t.zeros_like();
            for (o, &z) in v_xyz.data.iter_mut().zip(z_xyz_t.data.iter()) {
                *o = -0.2 * z + t;
            }
            Ok((v_rgb, v_xyz))
        }
    }

    /// cfg_scale = 1 reduces the guidance formula to the conditional pass.
    #[test]
    fn cfg_scale_one_matches_conditional_only() {
        let shape = (2, 2, 2, 2);
        let cond = toy_condition(shape);
        let cfg = SamplerConfig {
            steps: 13,
            cfg_scale: 1.0,
            seed: 3,
        };
        let (a_rgb, a_xyz) = sample(&CondSensitive, &cond, &cfg).unwrap();

        // Conditional-only integration, written out by hand.
        let (mut z_rgb, mut z_xyz) = init_noise(shape, shape, cfg.seed);
        let dt = 1.0 / cfg.steps as f64;
        for k in 0..cfg.steps {
            let t = k as f64 * dt;
            let (v_rgb, v_xyz) = CondSensitive.velocity(&z_rgb, &z_xyz, &cond, t).unwrap();
            z_rgb.add_scaled(&v_rgb, dt).unwrap();
            z_xyz.add_scaled(&v_xyz, dt).unwrap();
        }
        for i in 0..a_rgb.len() {
            assert!((a_rgb.data[i] - z_rgb.data[i]).abs() < 1e-12);
            assert!((a_xyz.data[i] - z_xyz.data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_is_deterministic_given_seed() {
        let cond = toy_condition((2, 2, 2, 2));
        let cfg = SamplerConfig {
            steps: 5,
            cfg_scale: 2.0,
            seed: 123,
        };
        let (a, b) = sample(&CondSensitive, &cond, &cfg).unwrap();
        let (c, d) = sample(&CondSensitive, &cond, &cfg).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
    }

    #[test]
    fn default_config_matches_inference_settings() {
        let cfg = SamplerConfig::default();
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.cfg_scale, 6.0);
    }
}
