//! Unified masked conditioning: pack single-image, sparse-frame, and
//! full-video conditions into one zero-filled conditioning video plus a
//! frame-level binary mask, and sample tasks for training.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::grids::{self, LatentGrid, PixelVideo};
use crate::rng::{Rng, SeededRng};

/// Conditioning video plus mask. Frames outside `observed` are zero in both.
#[derive(Clone, Debug)]
pub struct ConditionPack {
    /// 3 x F x H x W conditioning video; unobserved frames are all zeros.
    pub x_c: PixelVideo,
    /// 1 x F x H x W mask; each frame is constant 0 or 1.
    pub m_c: PixelVideo,
    /// Sorted observed frame indices.
    pub observed: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    SingleImage,
    SparseFrame,
    FullVideo,
}

/// Training task ratios.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskRatios {
    pub single_image: f64,
    pub sparse_frame: f64,
    pub full_video: f64,
}

impl Default for TaskRatios {
    fn default() -> Self {
        Self {
            single_image: 0.35,
            sparse_frame: 0.30,
            full_video: 0.35,
        }
    }
}

/// Copy `frames` at the observed indices, zero elsewhere; build the matching
/// frame-level binary mask.
pub fn build_condition(frames: &PixelVideo, observed: &[usize]) -> Result<ConditionPack> {
    if observed.is_empty() {
        return Err(Error::Domain(
            "build_condition: observed frame set is empty".into(),
        ));
    }
    let f = frames.frames;
    let mut sorted: Vec<usize> = observed.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&bad) = sorted.iter().find(|&&i| i >= f) {
        return Err(Error::Domain(format!(
            "build_condition: observed index {bad} out of range 0..{f}"
        )));
    }
    let mut x_c = PixelVideo::zeros(frames.channels, f, frames.height, frames.width);
    let mut m_c = PixelVideo::zeros(1, f, frames.height, frames.width);
    for &fr in &sorted {
        for c in 0..frames.channels {
            for y in 0..frames.height {
                for x in 0..frames.width {
                    x_c.set(c, fr, y, x, frames.at(c, fr, y, x));
                }
            }
        }
        for y in 0..frames.height {
            for x in 0..frames.width {
                m_c.set(0, fr, y, x, 1.0);
            }
        }
    }
    Ok(ConditionPack {
        x_c,
        m_c,
        observed: sorted,
    })
}

/// Space-to-depth reshape of the mask to latent resolution; values stay in
/// {0, 1} because the codec only permutes.
pub fn mask_to_latent(m_c: &PixelVideo, patch: usize) -> Result<LatentGrid> {
    if m_c.channels != 1 {
        return Err(Error::Dimension(format!(
            "mask_to_latent: expected a single-channel mask, got {} channels",
            m_c.channels
        )));
    }
    if let Some(bad) = m_c.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain(format!(
            "mask_to_latent: mask value {bad} is not binary"
        )));
    }
    grids::encode(m_c, patch)
}

/// Categorical task draw with the default ratios.
pub fn sample_task(rng: &mut SeededRng) -> TaskKind {
    sample_task_with(rng, &TaskRatios::default())
}

pub fn sample_task_with(rng: &mut SeededRng, ratios: &TaskRatios) -> TaskKind {
    let total = ratios.single_image + ratios.sparse_frame + ratios.full_video;
    let u: f64 = rng.gen::<f64>() * total;
    if u < ratios.single_image {
        TaskKind::SingleImage
    } else if u < ratios.single_image + ratios.sparse_frame {
        TaskKind::SparseFrame
    } else {
        TaskKind::FullVideo
    }
}

/// Observed-frame schedule for a sparsity ratio: always keeps the first and
/// last frame and spreads `n = max(2, round(s*F))` frames evenly, rounding
/// half away from zero.
pub fn sparse_schedule(frames: usize, sparsity: f64) -> Result<Vec<usize>> {
    if frames < 2 {
        return Err(Error::Domain(format!(
            "sparse_schedule: need at least 2 frames, got {frames}"
        )));
    }
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::Domain(format!(
            "sparse_schedule: sparsity {sparsity} outside (0, 1]"
        )));
    }
    let n = (fmath::round(sparsity * frames as f64) as usize).max(2);
    let n = n.min(frames);
    let mut out: Vec<usize> = (0..n)
        .map(|k| fmath::round(k as f64 * (frames - 1) as f64 / (n - 1) as f64) as usize)
        .collect();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec;

    fn frames(f: usize) -> PixelVideo {
        let mut r = rng::from_seed(50);
        let data = rng::normal_vec(&mut r, 3 * f * 4 * 4);
        PixelVideo::new(3, f, 4, 4, data).unwrap()
    }

    #[test]
    fn single_image_pack() {
        let v = frames(5);
        let pack = build_condition(&v, &[0]).unwrap();
        assert_eq!(pack.observed, vec![0]);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(pack.x_c.at(c, 0, y, x), v.at(c, 0, y, x));
                }
            }
        }
        for fr in 1..5 {
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        assert_eq!(pack.x_c.at(c, fr, y, x), 0.0);
                    }
                }
            }
            assert_eq!(pack.m_c.at(0, fr, 0, 0), 0.0);
        }
        assert_eq!(pack.m_c.at(0, 0, 0, 0), 1.0);
    }

    #[test]
    fn full_video_pack_copies_everything() {
        let v = frames(4);
        let all: vec::Vec<usize> = (0..4).collect();
        let pack = build_condition(&v, &all).unwrap();
        assert_eq!(pack.x_c, v);
        assert!(pack.m_c.data.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn sparse_pack_mask_pattern() {
        let v = frames(5);
        let pack = build_condition(&v, &[4, 0]).unwrap();
        assert_eq!(pack.observed, vec![0, 4]);
        let mask_per_frame: vec::Vec<f64> = (0..5).map(|fr| pack.m_c.at(0, fr, 2, 2)).collect();
        assert_eq!(mask_per_frame, vec![1.0, 0.0, 0.0, 0.0, 1.0]);
        for fr in [1usize, 2, 3] {
            for c in 0..3 {
                assert_eq!(pack.x_c.at(c, fr, 1, 1), 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_observed_sets() {
        let v = frames(3);
        assert!(matches!(build_condition(&v, &[]), Err(Error::Domain(_))));
        assert!(matches!(build_condition(&v, &[3]), Err(Error::Domain(_))));
    }

    #[test]
    fn mask_to_latent_shapes_and_values() {
        let v = frames(9);
        let big = PixelVideo::new(3, 9, 32, 32, vec![0.0; 3 * 9 * 32 * 32]).unwrap();
        let _ = v;
        let pack = build_condition(&big, &[0, 3]).unwrap();
        let m = mask_to_latent(&pack.m_c, 4).unwrap();
        assert_eq!(m.shape(), (16, 9, 8, 8));
        // frame-constant stays frame-constant
        for fr in 0..9 {
            let expect = if fr == 0 || fr == 3 { 1.0 } else { 0.0 };
            for c in 0..16 {
                for y in 0..8 {
                    for x in 0..8 {
                        assert_eq!(m.at(c, fr, y, x), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_to_latent_all_ones() {
        let ones = PixelVideo::new(1, 2, 8, 8, vec![1.0; 2 * 64]).unwrap();
        let m = mask_to_latent(&ones, 4).unwrap();
        assert_eq!(m.shape(), (16, 2, 2, 2));
        assert!(m.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_to_latent_rejects_non_binary() {
        let bad = PixelVideo::new(1, 1, 4, 4, vec![0.5; 16]).unwrap();
        assert!(mask_to_latent(&bad, 2).is_err());
    }

    #[test]
    fn task_ratios_empirical() {
        let mut r = rng::from_seed(99);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match sample_task(&mut r) {
                TaskKind::SingleImage => counts[0] += 1,
                TaskKind::SparseFrame => counts[1] += 1,
                TaskKind::FullVideo => counts[2] += 1,
            }
        }
        let freq: vec::Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        assert!((freq[0] - 0.35).abs() < 0.01, "{freq:?}");
        assert!((freq[1] - 0.30).abs() < 0.01, "{freq:?}");
        assert!((freq[2] - 0.35).abs() < 0.01, "{freq:?}");
    }

    #[test]
    fn task_sampling_deterministic() {
        let seq = |seed| {
            let mut r = rng::from_seed(seed);
            (0..32).map(|_| sample_task(&mut r)).collect::<vec::Vec<_>>()
        };
        assert_eq!(seq(5), seq(5));
    }

    #[test]
    fn schedule_worked_examples() {
        assert_eq!(sparse_schedule(10, 0.5).unwrap(), vec![0, 2, 5, 7, 9]);
        assert_eq!(sparse_schedule(50, 0.05).unwrap(), vec![0, 25, 49]);
        let all: vec::Vec<usize> = (0..7).collect();
        assert_eq!(sparse_schedule(7, 1.0).unwrap(), all);
    }

    #[test]
    fn schedule_always_keeps_endpoints() {
        for f in 2..40 {
            for s10 in 1..=10 {
                let s = s10 as f64 / 10.0;
                let idx = sparse_schedule(f, s).unwrap();
                assert_eq!(idx[0], 0);
                assert_eq!(*idx.last().unwrap(), f - 1);
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn schedule_count_monotone_in_sparsity() {
        for f in 2..30 {
            let mut prev = 0;
            for s100 in 1..=100 {
                let s = s100 as f64 / 100.0;
                let n = sparse_schedule(f, s).unwrap().len();
                assert!(n >= prev, "F={f} s={s}");
                prev = n;
            }
        }
    }

    #[test]
    fn schedule_domain_errors() {
        assert!(sparse_schedule(1, 0.5).is_err());
        assert!(sparse_schedule(10, 0.0).is_err());
        assert!(sparse_schedule(10, 1.5).is_err());
    }

    /// x_c is zero wherever the broadcast mask is zero.
    #[test]
    fn pack_invariant_masked_zeros() {
        let mut r = rng::from_seed(321);
        for _ in 0..50 {
            let f = 2 + (r.gen::<u64>() % 7) as usize;
            let count = 1 + (r.gen::<u64>() % f as u64) as usize;
            let mut observed = vec::Vec::new();
            for _ in 0..count {
                observed.push((r.gen::<u64>() % f as u64) as usize);
            }
            let v = frames(f);
            let pack = build_condition(&v, &observed).unwrap();
            for fr in 0..f {
                let m = pack.m_c.at(0, fr, 0, 0);
                for c in 0..3 {
                    for y in 0..4 {
                        for x in 0..4 {
                            let masked = pack.x_c.at(c, fr, y, x) * (1.0 - m);
                            assert_eq!(masked, 0.0);
                        }
                    }
                }
            }
        }
    }
}
