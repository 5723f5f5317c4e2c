//! Dense value grids, the invertible space-to-depth codec that stands in for
//! a learned video codec, and pointmap normalization.
//!
//! Both grid types store data in row-major (channel, frame, row, column)
//! order. The codec maps each `p x p` spatial block of a channel to `p*p`
//! latent channels with temporal stride 1, so `decode(encode(v)) == v`
//! holds bit-exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Floor for the normalization scale; guards degenerate scenes.
pub const SCALE_EPS: f64 = 1e-9;

/// A pixel-resolution value grid: RGB frames, XYZ pointmaps, conditioning
/// videos, or single-channel masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelVideo {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// A latent-resolution grid; the unit of diffusion.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Record of the per-clip pointmap normalization so it can be undone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    /// Midpoint of the axis-aligned bounding box over all frames.
    pub center: [f64; 3],
    /// Half the largest bounding-box extent, floored at [`SCALE_EPS`].
    pub scale: f64,
    /// Set when the input had no extent (empty or all points equal).
    pub degenerate: bool,
}

impl NormStats {
    /// Stats that make normalization the identity map.
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
            degenerate: false,
        }
    }
}

macro_rules! grid_impl {
    ($ty:ident) => {
        impl $ty {
            pub fn new(
                channels: usize,
                frames: usize,
                height: usize,
                width: usize,
                data: Vec<f64>,
            ) -> Result<Self> {
                let expect = channels * frames * height * width;
                if data.len() != expect {
                    return Err(Error::Dimension(format!(
                        concat!(
                            stringify!($ty),
                            ": data length {} does not match {}x{}x{}x{}"
                        ),
                        data.len(),
                        channels,
                        frames,
                        height,
                        width
                    )));
                }
                if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        concat!(stringify!($ty), ": non-finite value at flat index {}"),
                        bad
                    )));
                }
                Ok(Self {
                    channels,
                    frames,
                    height,
                    width,
                    data,
                })
            }

            pub fn zeros(channels: usize, frames: usize, height: usize, width: usize) -> Self {
                Self {
                    channels,
                    frames,
                    height,
                    width,
                    data: vec![0.0; channels * frames * height * width],
                }
            }

            pub fn shape(&self) -> (usize, usize, usize, usize) {
                (self.channels, self.frames, self.height, self.width)
            }

            pub fn same_shape(&self, other: &Self) -> bool {
                self.shape() == other.shape()
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            #[inline]
            pub fn index(&self, c: usize, f: usize, y: usize, x: usize) -> usize {
                ((c * self.frames + f) * self.height + y) * self.width + x
            }

            #[inline]
            pub fn at(&self, c: usize, f: usize, y: usize, x: usize) -> f64 {
                self.data[self.index(c, f, y, x)]
            }

            #[inline]
            pub fn set(&mut self, c: usize, f: usize, y: usize, x: usize, v: f64) {
                let i = self.index(c, f, y, x);
                self.data[i] = v;
            }
        }
    };
}

grid_impl!(PixelVideo);
grid_impl!(LatentGrid);

impl LatentGrid {
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.frames, self.height, self.width)
    }

    /// self += scale * other, element-wise.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Dimension(format!(
                "add_scaled: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }
}

/// Space-to-depth encoding: each `p x p` spatial block of each channel
/// becomes `p*p` latent channels; frames pass through unchanged. Lossless.
pub fn encode(video: &PixelVideo, patch: usize) -> Result<LatentGrid> {
    if patch == 0 {
        return Err(Error::Domain("encode: patch must be >= 1".into()));
    }
    if video.height % patch != 0 {
        return Err(Error::Dimension(format!(
            "encode: height {} not divisible by patch {}",
            video.height, patch
        )));
    }
    if video.width % patch != 0 {
        return Err(Error::Dimension(format!(
            "encode: width {} not divisible by patch {}",
            video.width, patch
        )));
    }
    let (c, f, h, w) = video.shape();
    let (lh, lw) = (h / patch, w / patch);
    let lc = c * patch * patch;
    let mut latent = LatentGrid::zeros(lc, f, lh, lw);
    for ch in 0..c {
        for dy in 0..patch {
            for dx in 0..patch {
                let out_ch = (ch * patch + dy) * patch + dx;
                for fr in 0..f {
                    for y in 0..lh {
                        for x in 0..lw {
                            let v = video.at(ch, fr, y * patch + dy, x * patch + dx);
                            latent.set(out_ch, fr, y, x, v);
                        }
                    }
                }
            }
        }
    }
    Ok(latent)
}

/// Exact inverse of [`encode`].
pub fn decode(latent: &LatentGrid, patch: usize) -> Result<PixelVideo> {
    if patch == 0 {
        return Err(Error::Domain("decode: patch must be >= 1".into()));
    }
    let block = patch * patch;
    if latent.channels % block != 0 {
        return Err(Error::Dimension(format!(
            "decode: {} latent channels not divisible by patch^2 = {}",
            latent.channels, block
        )));
    }
    let c = latent.channels / block;
    let (f, lh, lw) = (latent.frames, latent.height, latent.width);
    let mut video = PixelVideo::zeros(c, f, lh * patch, lw * patch);
    for ch in 0..c {
        for dy in 0..patch {
            for dx in 0..patch {
                let in_ch = (ch * patch + dy) * patch + dx;
                for fr in 0..f {
                    for y in 0..lh {
                        for x in 0..lw {
                            let v = latent.at(in_ch, fr, y, x);
                            video.set(ch, fr, y * patch + dy, x * patch + dx, v);
                        }
                    }
                }
            }
        }
    }
    Ok(video)
}

/// Map a 3-channel pointmap video into [-1, 1] using the global bounding box
/// over the whole clip, returning the stats needed to undo the map.
pub fn normalize_pointmaps(pm: &PixelVideo) -> Result<(PixelVideo, NormStats)> {
    if pm.channels != 3 {
        return Err(Error::Dimension(format!(
            "normalize_pointmaps: expected 3 channels, got {}",
            pm.channels
        )));
    }
    let per_channel = pm.frames * pm.height * pm.width;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for ch in 0..3 {
        for &v in &pm.data[ch * per_channel..(ch + 1) * per_channel] {
            if v < lo[ch] {
                lo[ch] = v;
            }
            if v > hi[ch] {
                hi[ch] = v;
            }
        }
    }
    if per_channel == 0 {
        let stats = NormStats {
            center: [0.0; 3],
            scale: SCALE_EPS,
            degenerate: true,
        };
        return Ok((pm.clone(), stats));
    }
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let half_extent = (0..3).fold(0.0f64, |m, ch| m.max(0.5 * (hi[ch] - lo[ch])));
    let degenerate = half_extent < SCALE_EPS;
    let scale = half_extent.max(SCALE_EPS);

    let mut out = pm.clone();
    for ch in 0..3 {
        for v in &mut out.data[ch * per_channel..(ch + 1) * per_channel] {
            *v = ((*v - center[ch]) / scale).clamp(-1.0, 1.0);
        }
    }
    let stats = NormStats {
        center,
        scale,
        degenerate,
    };
    Ok((out, stats))
}

/// Undo [`normalize_pointmaps`].
pub fn denormalize_pointmaps(pm: &PixelVideo, stats: &NormStats) -> Result<PixelVideo> {
    if pm.channels != 3 {
        return Err(Error::Dimension(format!(
            "denormalize_pointmaps: expected 3 channels, got {}",
            pm.channels
        )));
    }
    let per_channel = pm.frames * pm.height * pm.width;
    let mut out = pm.clone();
    for ch in 0..3 {
        for v in &mut out.data[ch * per_channel..(ch + 1) * per_channel] {
            *v = *v * stats.scale + stats.center[ch];
        }
    }
    Ok(out)
}
