//! Toy diffusion transformer running two adapter branches (RGB and XYZ)
//! over shared frozen weights, exchanging features through zero-initialized
//! control links at selected layers, and predicting one velocity per stream.
//!
//! Interior layer weights are shared between the streams; only the input
//! and output projections are stream-specific because the RGB stream
//! carries extra conditioning channels. Every linear map is wrapped by a
//! per-stream low-rank adapter. The XYZ stream never sees the conditioning
//! or the mask directly; that signal can only arrive through the links.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dlc::{self, LinkPlan};
use crate::error::{Error, Result};
use crate::flow::{LatentCondition, VelocityModel};
use crate::fmath;
use crate::grids::LatentGrid;
use crate::mat::Mat;
use crate::optim::{ParamId, ParamSet};
use crate::rng;
use crate::tape::{Tape, Var};

const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub token_dim: usize,
    pub heads: usize,
    /// Spatial patch applied to latents when forming tokens.
    pub latent_patch: usize,
    pub link_plan: LinkPlan,
    /// Channels of the RGB-stream input (noisy latent + conditioning + mask).
    pub rgb_in_channels: usize,
    /// Channels of the XYZ-stream input; also the per-stream output channels.
    pub xyz_in_channels: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub lora_init_std: f64,
    pub ffn_mult: usize,
}

impl BackboneConfig {
    /// Toy defaults: 6 layers, 64-dim tokens, 4 heads, patch 2, 2 links.
    pub fn toy(rgb_in_channels: usize, xyz_in_channels: usize) -> Self {
        Self {
            layers: 6,
            token_dim: 64,
            heads: 4,
            latent_patch: 2,
            link_plan: dlc::plan_links(6, 2).expect("static plan"),
            rgb_in_channels,
            xyz_in_channels,
            lora_rank: 64,
            lora_scale: 1.0,
            lora_init_std: 0.02,
            ffn_mult: 4,
        }
    }

    pub fn rgb_in_features(&self) -> usize {
        self.rgb_in_channels * self.latent_patch * self.latent_patch
    }

    pub fn xyz_in_features(&self) -> usize {
        self.xyz_in_channels * self.latent_patch * self.latent_patch
    }

    pub fn out_features(&self) -> usize {
        self.xyz_in_channels * self.latent_patch * self.latent_patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Domain("backbone needs at least one layer".into()));
        }
        if self.token_dim == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::Domain(format!(
                "token_dim {} must be a positive multiple of heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.token_dim % 2 != 0 {
            return Err(Error::Domain("token_dim must be even".into()));
        }
        if self.latent_patch == 0 {
            return Err(Error::Domain("latent_patch must be >= 1".into()));
        }
        if self.link_plan.n_layers != self.layers
            || self.link_plan.indices().iter().any(|&i| i > self.layers)
        {
            return Err(Error::Domain(format!(
                "link plan targets {} layers but the backbone has {}",
                self.link_plan.n_layers, self.layers
            )));
        }
        if self.rgb_in_channels == 0 || self.xyz_in_channels == 0 {
            return Err(Error::Domain("channel counts must be positive".into()));
        }
        let min_dim = self
            .token_dim
            .min(self.rgb_in_features())
            .min(self.xyz_in_features())
            .min(self.out_features());
        if self.lora_rank < 1 || self.lora_rank > min_dim {
            return Err(Error::Domain(format!(
                "lora_rank {} outside [1, {min_dim}] for these layer shapes",
                self.lora_rank
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Domain("ffn_mult must be >= 1".into()));
        }
        Ok(())
    }
}

/// Flattened space-time tokens of a latent grid plus the shape needed to
/// undo the flattening.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub tokens: Mat,
    /// (frames, patched height, patched width)
    pub origin: (usize, usize, usize),
}

/// Latent grid -> token matrix. Token (fr, by, bx) carries the features of
/// one `patch x patch` spatial block across all channels, ordered
/// (channel, dy, dx).
pub fn patchify(grid: &LatentGrid, patch: usize) -> Result<TokenStream> {
    if patch == 0 {
        return Err(Error::Domain("patchify: patch must be >= 1".into()));
    }
    if grid.height % patch != 0 {
        return Err(Error::Dimension(format!(
            "patchify: height {} not divisible by patch {}",
            grid.height, patch
        )));
    }
    if grid.width % patch != 0 {
        return Err(Error::Dimension(format!(
            "patchify: width {} not divisible by patch {}",
            grid.width, patch
        )));
    }
    let (c, f, h, w) = grid.shape();
    let (hp, wp) = (h / patch, w / patch);
    let count = f * hp * wp;
    let dim = c * patch * patch;
    let mut tokens = Mat::zeros(count, dim);
    for fr in 0..f {
        for by in 0..hp {
            for bx in 0..wp {
                let row = (fr * hp + by) * wp + bx;
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let col = (ch * patch + dy) * patch + dx;
                            tokens.set(row, col, grid.at(ch, fr, by * patch + dy, bx * patch + dx));
                        }
                    }
                }
            }
        }
    }
    Ok(TokenStream {
        tokens,
        origin: (f, hp, wp),
    })
}

/// Token matrix -> latent grid; exact inverse of [`patchify`].
pub fn unpatchify(ts: &TokenStream, channels: usize, patch: usize) -> Result<LatentGrid> {
    let (f, hp, wp) = ts.origin;
    if ts.tokens.rows != f * hp * wp {
        return Err(Error::Dimension(format!(
            "unpatchify: {} tokens do not match origin {}x{}x{}",
            ts.tokens.rows, f, hp, wp
        )));
    }
    if ts.tokens.cols != channels * patch * patch {
        return Err(Error::Dimension(format!(
            "unpatchify: token dim {} does not match {} channels at patch {}",
            ts.tokens.cols, channels, patch
        )));
    }
    let mut grid = LatentGrid::zeros(channels, f, hp * patch, wp * patch);
    for fr in 0..f {
        for by in 0..hp {
            for bx in 0..wp {
                let row = (fr * hp + by) * wp + bx;
                for ch in 0..channels {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let col = (ch * patch + dy) * patch + dx;
                            grid.set(
                                ch,
                                fr,
                                by * patch + dy,
                                bx * patch + dx,
                                ts.tokens.at(row, col),
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Channel-wise concatenation (noisy RGB latent, conditioning latent, mask),
/// in that order. Only the RGB stream ever receives this.
pub fn assemble_input(
    z_rgb_t: &LatentGrid,
    z_c: &LatentGrid,
    m_latent: &LatentGrid,
) -> Result<LatentGrid> {
    let spatial = |g: &LatentGrid| (g.frames, g.height, g.width);
    if spatial(z_rgb_t) != spatial(z_c) || spatial(z_rgb_t) != spatial(m_latent) {
        return Err(Error::Dimension(format!(
            "assemble_input: frame/spatial dims differ: {:?} vs {:?} vs {:?}",
            spatial(z_rgb_t),
            spatial(z_c),
            spatial(m_latent)
        )));
    }
    let mut data = Vec::with_capacity(z_rgb_t.len() + z_c.len() + m_latent.len());
    data.extend_from_slice(&z_rgb_t.data);
    data.extend_from_slice(&z_c.data);
    data.extend_from_slice(&m_latent.data);
    Ok(LatentGrid {
        channels: z_rgb_t.channels + z_c.channels + m_latent.channels,
        frames: z_rgb_t.frames,
        height: z_rgb_t.height,
        width: z_rgb_t.width,
        data,
    })
}

/// Sinusoidal embedding of `t` in [0, 1]; half sines, half cosines with
/// log-spaced frequencies.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let expo = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = fmath::powf(1000.0, expo);
        out[i] = fmath::sin(t * freq);
        out[half + i] = fmath::cos(t * freq);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Xyz,
}

#[derive(Clone, Copy)]
struct LinId {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy)]
struct AdId {
    down: ParamId,
    up: ParamId,
}

#[derive(Clone, Copy)]
struct LayerBaseIds {
    wq: LinId,
    wk: LinId,
    wv: LinId,
    wo: LinId,
    ffn1: LinId,
    ffn2: LinId,
    modlin: LinId,
}

struct BaseIds {
    tmlp1: LinId,
    tmlp2: LinId,
    in_rgb: LinId,
    in_xyz: LinId,
    layers: Vec<LayerBaseIds>,
    out_rgb: LinId,
    out_xyz: LinId,
}

#[derive(Clone, Copy)]
struct LayerAdIds {
    wq: AdId,
    wk: AdId,
    wv: AdId,
    wo: AdId,
    ffn1: AdId,
    ffn2: AdId,
    modlin: AdId,
}

struct StreamIds {
    tmlp1: AdId,
    tmlp2: AdId,
    in_proj: AdId,
    out_proj: AdId,
    layers: Vec<LayerAdIds>,
}

#[derive(Clone, Copy)]
struct LinkIds {
    rgb_from_xyz: LinId,
    xyz_from_rgb: LinId,
}

/// The dual-branch model: frozen base weights plus trainable adapters and
/// links, each stored in a named [`ParamSet`].
pub struct DualBackbone {
    pub cfg: BackboneConfig,
    /// Frozen base weights. Never stepped by the optimizer.
    pub base: ParamSet,
    /// Adapters and control links; everything training touches.
    pub trainable: ParamSet,
    base_ids: BaseIds,
    rgb_ids: StreamIds,
    xyz_ids: StreamIds,
    link_ids: Vec<LinkIds>,
}

fn add_linear(
    ps: &mut ParamSet,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    std: f64,
    rng: &mut rng::SeededRng,
) -> Result<LinId> {
    let w = Mat::gaussian(in_dim, out_dim, std, rng);
    let wid = ps.add(&format!("{name}.w"), in_dim, out_dim, w.data)?;
    let bid = ps.add(&format!("{name}.b"), 1, out_dim, vec![0.0; out_dim])?;
    Ok(LinId { w: wid, b: bid })
}

fn add_adapter(
    ps: &mut ParamSet,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    std: f64,
    rng: &mut rng::SeededRng,
) -> Result<AdId> {
    let down = Mat::gaussian(in_dim, rank, std, rng);
    let did = ps.add(&format!("{name}.down"), in_dim, rank, down.data)?;
    let uid = ps.add(&format!("{name}.up"), rank, out_dim, vec![0.0; rank * out_dim])?;
    Ok(AdId { down: did, up: uid })
}

fn add_link(ps: &mut ParamSet, name: &str, dim: usize) -> Result<LinId> {
    let wid = ps.add(&format!("{name}.w"), dim, dim, vec![0.0; dim * dim])?;
    let bid = ps.add(&format!("{name}.b"), 1, dim, vec![0.0; dim])?;
    Ok(LinId { w: wid, b: bid })
}

impl DualBackbone {
    /// Seeded init. Base weights are Gaussian with std `1/sqrt(in_dim)`,
    /// adapter down-factors Gaussian with the configured std, adapter
    /// up-factors and all links exactly zero.
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::from_seed(seed);
        let d = cfg.token_dim;
        let hd = d * cfg.ffn_mult;
        let mut base = ParamSet::new();

        let winit = |dim: usize| 1.0 / fmath::sqrt(dim as f64);

        let tmlp1 = add_linear(&mut base, "base.tmlp1", d, d, winit(d), &mut r)?;
        let tmlp2 = add_linear(&mut base, "base.tmlp2", d, d, winit(d), &mut r)?;
        let in_rgb = add_linear(
            &mut base,
            "base.in_rgb",
            cfg.rgb_in_features(),
            d,
            winit(cfg.rgb_in_features()),
            &mut r,
        )?;
        let in_xyz = add_linear(
            &mut base,
            "base.in_xyz",
            cfg.xyz_in_features(),
            d,
            winit(cfg.xyz_in_features()),
            &mut r,
        )?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let p = |n: &str| format!("base.layer{l:02}.{n}");
            layers.push(LayerBaseIds {
                wq: add_linear(&mut base, &p("wq"), d, d, winit(d), &mut r)?,
                wk: add_linear(&mut base, &p("wk"), d, d, winit(d), &mut r)?,
                wv: add_linear(&mut base, &p("wv"), d, d, winit(d), &mut r)?,
                wo: add_linear(&mut base, &p("wo"), d, d, winit(d), &mut r)?,
                ffn1: add_linear(&mut base, &p("ffn1"), d, hd, winit(d), &mut r)?,
                ffn2: add_linear(&mut base, &p("ffn2"), hd, d, winit(hd), &mut r)?,
                modlin: add_linear(&mut base, &p("mod"), d, 4 * d, winit(d), &mut r)?,
            });
        }
        let out_rgb = add_linear(
            &mut base,
            "base.out_rgb",
            d,
            cfg.out_features(),
            winit(d),
            &mut r,
        )?;
        let out_xyz = add_linear(
            &mut base,
            "base.out_xyz",
            d,
            cfg.out_features(),
            winit(d),
            &mut r,
        )?;
        let base_ids = BaseIds {
            tmlp1,
            tmlp2,
            in_rgb,
            in_xyz,
            layers,
            out_rgb,
            out_xyz,
        };

        let mut trainable = ParamSet::new();
        let stream_ids = |name: &str,
                          in_feats: usize,
                          tr: &mut ParamSet,
                          r: &mut rng::SeededRng|
         -> Result<StreamIds> {
            let rank = cfg.lora_rank;
            let std = cfg.lora_init_std;
            let p = |n: &str| format!("lora.{name}.{n}");
            let tmlp1 = add_adapter(tr, &p("tmlp1"), d, d, rank, std, r)?;
            let tmlp2 = add_adapter(tr, &p("tmlp2"), d, d, rank, std, r)?;
            let in_proj = add_adapter(tr, &p("in"), in_feats, d, rank, std, r)?;
            let mut layers = Vec::with_capacity(cfg.layers);
            for l in 1..=cfg.layers {
                let q = |n: &str| format!("lora.{name}.layer{l:02}.{n}");
                layers.push(LayerAdIds {
                    wq: add_adapter(tr, &q("wq"), d, d, rank, std, r)?,
                    wk: add_adapter(tr, &q("wk"), d, d, rank, std, r)?,
                    wv: add_adapter(tr, &q("wv"), d, d, rank, std, r)?,
                    wo: add_adapter(tr, &q("wo"), d, d, rank, std, r)?,
                    ffn1: add_adapter(tr, &q("ffn1"), d, hd, rank, std, r)?,
                    ffn2: add_adapter(tr, &q("ffn2"), hd, d, rank, std, r)?,
                    modlin: add_adapter(tr, &q("mod"), d, 4 * d, rank, std, r)?,
                });
            }
            let out_proj = add_adapter(tr, &p("out"), d, cfg.out_features(), rank, std, r)?;
            Ok(StreamIds {
                tmlp1,
                tmlp2,
                in_proj,
                out_proj,
                layers,
            })
        };
        let rgb_ids = stream_ids("rgb", cfg.rgb_in_features(), &mut trainable, &mut r)?;
        let xyz_ids = stream_ids("xyz", cfg.xyz_in_features(), &mut trainable, &mut r)?;

        let mut link_ids = Vec::new();
        for &l in cfg.link_plan.indices() {
            let rx = add_link(&mut trainable, &format!("link.layer{l:02}.rgb_from_xyz"), d)?;
            let xr = add_link(&mut trainable, &format!("link.layer{l:02}.xyz_from_rgb"), d)?;
            link_ids.push(LinkIds {
                rgb_from_xyz: rx,
                xyz_from_rgb: xr,
            });
        }

        Ok(Self {
            cfg,
            base,
            trainable,
            base_ids,
            rgb_ids,
            xyz_ids,
            link_ids,
        })
    }

    /// Set every adapter tensor of one stream to zero (both factors).
    pub fn zero_stream_adapters(&mut self, stream: Stream) {
        let prefix = match stream {
            Stream::Rgb => "lora.rgb.",
            Stream::Xyz => "lora.xyz.",
        };
        for t in self.trainable.iter_mut() {
            if t.name.starts_with(prefix) {
                t.value.fill(0.0);
            }
        }
    }

    /// Set every control link tensor to zero.
    pub fn zero_links(&mut self) {
        for t in self.trainable.iter_mut() {
            if t.name.starts_with("link.") {
                t.value.fill(0.0);
            }
        }
    }

    fn bind_set(tape: &mut Tape, set: &ParamSet, as_params: bool) -> Result<Vec<Var>> {
        let mut vars = Vec::with_capacity(set.len());
        for t in set.iter() {
            let v = if as_params {
                tape.param(t.rows, t.cols, &t.value)?
            } else {
                tape.constant(t.rows, t.cols, &t.value)?
            };
            vars.push(v);
        }
        Ok(vars)
    }

    fn validate_inputs(&self, z_input: &LatentGrid, z_xyz_t: &LatentGrid, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("dual_forward: t = {t} outside [0, 1]")));
        }
        if z_input.channels != self.cfg.rgb_in_channels {
            return Err(Error::Dimension(format!(
                "dual_forward: assembled input has {} channels, expected {}",
                z_input.channels, self.cfg.rgb_in_channels
            )));
        }
        if z_xyz_t.channels != self.cfg.xyz_in_channels {
            return Err(Error::Dimension(format!(
                "dual_forward: xyz input has {} channels, expected {}",
                z_xyz_t.channels, self.cfg.xyz_in_channels
            )));
        }
        let sp = |g: &LatentGrid| (g.frames, g.height, g.width);
        if sp(z_input) != sp(z_xyz_t) {
            return Err(Error::Dimension(format!(
                "dual_forward: stream dims differ: {:?} vs {:?}",
                sp(z_input),
                sp(z_xyz_t)
            )));
        }
        Ok(())
    }

    /// Both velocity grids for assembled RGB input and noisy XYZ latent.
    pub fn dual_forward(
        &self,
        z_input: &LatentGrid,
        z_xyz_t: &LatentGrid,
        t: f64,
    ) -> Result<(LatentGrid, LatentGrid)> {
        self.validate_inputs(z_input, z_xyz_t, t)?;
        let rgb_tokens = patchify(z_input, self.cfg.latent_patch)?;
        let xyz_tokens = patchify(z_xyz_t, self.cfg.latent_patch)?;
        let mut tape = Tape::new();
        let bb = Self::bind_set(&mut tape, &self.base, false)?;
        let bt = Self::bind_set(&mut tape, &self.trainable, false)?;
        let rt = tape.constant_mat(&rgb_tokens.tokens)?;
        let xt = tape.constant_mat(&xyz_tokens.tokens)?;
        let (out_r, out_x) = self.forward_on_tape(&mut tape, &bb, &bt, rt, xt, t)?;
        let grid_r = unpatchify(
            &TokenStream {
                tokens: tape.value_as_mat(out_r),
                origin: rgb_tokens.origin,
            },
            self.cfg.xyz_in_channels,
            self.cfg.latent_patch,
        )?;
        let grid_x = unpatchify(
            &TokenStream {
                tokens: tape.value_as_mat(out_x),
                origin: xyz_tokens.origin,
            },
            self.cfg.xyz_in_channels,
            self.cfg.latent_patch,
        )?;
        Ok((grid_r, grid_x))
    }

    /// The frozen base model applied to one stream alone: no adapters, no
    /// links. Reference path for the decoupling identity.
    pub fn base_forward_stream(
        &self,
        z: &LatentGrid,
        t: f64,
        stream: Stream,
    ) -> Result<LatentGrid> {
        let expect = match stream {
            Stream::Rgb => self.cfg.rgb_in_channels,
            Stream::Xyz => self.cfg.xyz_in_channels,
        };
        if z.channels != expect {
            return Err(Error::Dimension(format!(
                "base_forward_stream: input has {} channels, expected {expect}",
                z.channels
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!(
                "base_forward_stream: t = {t} outside [0, 1]"
            )));
        }
        let tokens = patchify(z, self.cfg.latent_patch)?;
        let mut tape = Tape::new();
        let bb = Self::bind_set(&mut tape, &self.base, false)?;
        let tok = tape.constant_mat(&tokens.tokens)?;
        let out = self.stream_forward_on_tape(&mut tape, &bb, None, tok, t, stream)?;
        unpatchify(
            &TokenStream {
                tokens: tape.value_as_mat(out),
                origin: tokens.origin,
            },
            self.cfg.xyz_in_channels,
            self.cfg.latent_patch,
        )
    }

    /// Flow-matching loss plus parameter gradients accumulated into
    /// `self.trainable`. Targets are given at latent resolution.
    pub fn backward_loss(
        &mut self,
        z_input: &LatentGrid,
        z_xyz_t: &LatentGrid,
        t: f64,
        v_tgt_rgb: &LatentGrid,
        v_tgt_xyz: &LatentGrid,
    ) -> Result<f64> {
        self.validate_inputs(z_input, z_xyz_t, t)?;
        if !v_tgt_rgb.same_shape(v_tgt_xyz)
            || v_tgt_rgb.channels != self.cfg.xyz_in_channels
            || (v_tgt_rgb.frames, v_tgt_rgb.height, v_tgt_rgb.width)
                != (z_input.frames, z_input.height, z_input.width)
        {
            return Err(Error::Dimension(format!(
                "backward_loss: target shapes {:?} / {:?} do not match inputs",
                v_tgt_rgb.shape(),
                v_tgt_xyz.shape()
            )));
        }
        let rgb_tokens = patchify(z_input, self.cfg.latent_patch)?;
        let xyz_tokens = patchify(z_xyz_t, self.cfg.latent_patch)?;
        // The token layout is a bijection, so the mean of squares over token
        // matrices equals the mean over the latent grids.
        let tgt_r = patchify(v_tgt_rgb, self.cfg.latent_patch)?;
        let tgt_x = patchify(v_tgt_xyz, self.cfg.latent_patch)?;

        let mut tape = Tape::new();
        let bb = Self::bind_set(&mut tape, &self.base, false)?;
        let bt = Self::bind_set(&mut tape, &self.trainable, true)?;
        let rt = tape.constant_mat(&rgb_tokens.tokens)?;
        let xt = tape.constant_mat(&xyz_tokens.tokens)?;
        let (out_r, out_x) = self.forward_on_tape(&mut tape, &bb, &bt, rt, xt, t)?;

        let tr = tape.constant_mat(&tgt_r.tokens)?;
        let tx = tape.constant_mat(&tgt_x.tokens)?;
        let dr = tape.sub(out_r, tr)?;
        let sr = tape.mul(dr, dr)?;
        let mr = tape.mean(sr)?;
        let dx = tape.sub(out_x, tx)?;
        let sx = tape.mul(dx, dx)?;
        let mx = tape.mean(sx)?;
        let loss = tape.add(mr, mx)?;

        let grads = tape.backward(loss)?;
        for (i, var) in bt.iter().enumerate() {
            if let Some(g) = grads.get(*var) {
                let tensor = self.trainable.get_mut(ParamId(i));
                for (dst, src) in tensor.grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(tape.scalar_value(loss))
    }

    /// Full dual forward on an existing tape; returns output token vars.
    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        base_vars: &[Var],
        train_vars: &[Var],
        rgb_tokens: Var,
        xyz_tokens: Var,
        t: f64,
    ) -> Result<(Var, Var)> {
        let lin = |id: LinId| (base_vars[id.w.0], base_vars[id.b.0]);
        let ad =
            |id: AdId| Some((train_vars[id.down.0], train_vars[id.up.0], self.cfg.lora_scale));

        let emb = time_embedding(t, self.cfg.token_dim);
        let emb_r = tape.constant(1, self.cfg.token_dim, &emb)?;
        let emb_x = tape.constant(1, self.cfg.token_dim, &emb)?;

        let e_rgb = self.time_mlp(tape, emb_r, &lin, ad, &self.rgb_ids)?;
        let e_xyz = self.time_mlp(tape, emb_x, &lin, ad, &self.xyz_ids)?;

        let (w, b) = lin(self.base_ids.in_rgb);
        let mut x_r = dlc::tape_lora_linear(tape, rgb_tokens, w, b, ad(self.rgb_ids.in_proj))?;
        let (w, b) = lin(self.base_ids.in_xyz);
        let mut x_x = dlc::tape_lora_linear(tape, xyz_tokens, w, b, ad(self.xyz_ids.in_proj))?;

        let mut link_cursor = 0usize;
        for l in 1..=self.cfg.layers {
            let lb = self.base_ids.layers[l - 1];
            let ctx = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("layer {l}: {m}")),
                other => other,
            };
            x_r = self
                .layer_forward(tape, x_r, e_rgb, lb, self.rgb_ids.layers[l - 1], &lin, ad)
                .map_err(ctx)?;
            let ctx = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("layer {l}: {m}")),
                other => other,
            };
            x_x = self
                .layer_forward(tape, x_x, e_xyz, lb, self.xyz_ids.layers[l - 1], &lin, ad)
                .map_err(ctx)?;
            if self.cfg.link_plan.contains(l) {
                let ids = self.link_ids[link_cursor];
                let tv = |id: LinId| (train_vars[id.w.0], train_vars[id.b.0]);
                let (nr, nx) = dlc::tape_control_exchange(
                    tape,
                    x_r,
                    x_x,
                    tv(ids.rgb_from_xyz),
                    tv(ids.xyz_from_rgb),
                )?;
                x_r = nr;
                x_x = nx;
                link_cursor += 1;
            }
        }

        let (w, b) = lin(self.base_ids.out_rgb);
        let out_r = dlc::tape_lora_linear(tape, x_r, w, b, ad(self.rgb_ids.out_proj))?;
        let (w, b) = lin(self.base_ids.out_xyz);
        let out_x = dlc::tape_lora_linear(tape, x_x, w, b, ad(self.xyz_ids.out_proj))?;
        Ok((out_r, out_x))
    }

    /// Single-stream base-only forward (no adapters, no links).
    fn stream_forward_on_tape(
        &self,
        tape: &mut Tape,
        base_vars: &[Var],
        train_vars: Option<&[Var]>,
        tokens: Var,
        t: f64,
        stream: Stream,
    ) -> Result<Var> {
        let lin = |id: LinId| (base_vars[id.w.0], base_vars[id.b.0]);
        let ids = match stream {
            Stream::Rgb => &self.rgb_ids,
            Stream::Xyz => &self.xyz_ids,
        };
        let ad = |id: AdId| {
            train_vars.map(|tv| (tv[id.down.0], tv[id.up.0], self.cfg.lora_scale))
        };
        let emb = time_embedding(t, self.cfg.token_dim);
        let emb = tape.constant(1, self.cfg.token_dim, &emb)?;
        let e = self.time_mlp(tape, emb, &lin, |a| ad(a), ids)?;
        let in_id = match stream {
            Stream::Rgb => self.base_ids.in_rgb,
            Stream::Xyz => self.base_ids.in_xyz,
        };
        let (w, b) = lin(in_id);
        let mut x = dlc::tape_lora_linear(tape, tokens, w, b, ad(ids.in_proj))?;
        for l in 1..=self.cfg.layers {
            let lb = self.base_ids.layers[l - 1];
            let ctx = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("layer {l}: {m}")),
                other => other,
            };
            x = self
                .layer_forward(tape, x, e, lb, ids.layers[l - 1], &lin, |a| ad(a))
                .map_err(ctx)?;
        }
        let out_id = match stream {
            Stream::Rgb => self.base_ids.out_rgb,
            Stream::Xyz => self.base_ids.out_xyz,
        };
        let (w, b) = lin(out_id);
        dlc::tape_lora_linear(tape, x, w, b, ad(ids.out_proj))
    }

    fn time_mlp(
        &self,
        tape: &mut Tape,
        emb: Var,
        lin: &dyn Fn(LinId) -> (Var, Var),
        ad: impl Fn(AdId) -> Option<(Var, Var, f64)>,
        ids: &StreamIds,
    ) -> Result<Var> {
        let (w, b) = lin(self.base_ids.tmlp1);
        let e = dlc::tape_lora_linear(tape, emb, w, b, ad(ids.tmlp1))?;
        let e = tape.silu(e)?;
        let (w, b) = lin(self.base_ids.tmlp2);
        let e = dlc::tape_lora_linear(tape, e, w, b, ad(ids.tmlp2))?;
        // Pre-activated conditioning vector consumed by every layer's
        // modulation head.
        tape.silu(e)
    }

    /// One pre-norm block: modulated self-attention then modulated
    /// feed-forward, both with residuals.
    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        tape: &mut Tape,
        x: Var,
        e_silu: Var,
        lb: LayerBaseIds,
        la: LayerAdIds,
        lin: &dyn Fn(LinId) -> (Var, Var),
        ad: impl Fn(AdId) -> Option<(Var, Var, f64)>,
    ) -> Result<Var> {
        let d = self.cfg.token_dim;
        let (w, b) = lin(lb.modlin);
        let modp = dlc::tape_lora_linear(tape, e_silu, w, b, ad(la.modlin))?;
        let sa = tape.slice_cols(modp, 0, d)?;
        let ba = tape.slice_cols(modp, d, 2 * d)?;
        let sf = tape.slice_cols(modp, 2 * d, 3 * d)?;
        let bf = tape.slice_cols(modp, 3 * d, 4 * d)?;

        // attention sublayer
        let h = tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
        let sa1 = tape.add_scalar(sa, 1.0)?;
        let h = tape.mul_row(h, sa1)?;
        let h = tape.add_row(h, ba)?;
        let (w, b) = lin(lb.wq);
        let q = dlc::tape_lora_linear(tape, h, w, b, ad(la.wq))?;
        let (w, b) = lin(lb.wk);
        let k = dlc::tape_lora_linear(tape, h, w, b, ad(la.wk))?;
        let (w, b) = lin(lb.wv);
        let v = dlc::tape_lora_linear(tape, h, w, b, ad(la.wv))?;
        let attn = self.multihead(tape, q, k, v)?;
        let (w, b) = lin(lb.wo);
        let o = dlc::tape_lora_linear(tape, attn, w, b, ad(la.wo))?;
        let x = tape.add(x, o)?;

        // feed-forward sublayer
        let h = tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
        let sf1 = tape.add_scalar(sf, 1.0)?;
        let h = tape.mul_row(h, sf1)?;
        let h = tape.add_row(h, bf)?;
        let (w, b) = lin(lb.ffn1);
        let f = dlc::tape_lora_linear(tape, h, w, b, ad(la.ffn1))?;
        let f = tape.silu(f)?;
        let (w, b) = lin(lb.ffn2);
        let f = dlc::tape_lora_linear(tape, f, w, b, ad(la.ffn2))?;
        tape.add(x, f)
    }

    /// Full (non-causal) attention over all space-time tokens.
    fn multihead(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = self.cfg.token_dim;
        let heads = self.cfg.heads;
        let hd = d / heads;
        let scale = 1.0 / fmath::sqrt(hd as f64);
        let mut joined: Option<Var> = None;
        for h in 0..heads {
            let (a, b) = (h * hd, (h + 1) * hd);
            let qh = tape.slice_cols(q, a, b)?;
            let kh = tape.slice_cols(k, a, b)?;
            let vh = tape.slice_cols(v, a, b)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.mul_scalar(scores, scale)?;
            let probs = tape.softmax_rows(scores)?;
            let oh = tape.matmul(probs, vh)?;
            joined = Some(match joined {
                None => oh,
                Some(j) => tape.concat_cols(j, oh)?,
            });
        }
        Ok(joined.expect("at least one head"))
    }
}

impl VelocityModel for DualBackbone {
    fn velocity(
        &self,
        z_rgb_t: &LatentGrid,
        z_xyz_t: &LatentGrid,
        cond: &LatentCondition,
        t: f64,
    ) -> Result<(LatentGrid, LatentGrid)> {
        let z_input = assemble_input(z_rgb_t, &cond.z_c, &cond.mask)?;
        self.dual_forward(&z_input, z_xyz_t, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tape::gradcheck;

    fn mini_cfg() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            token_dim: 16,
            heads: 2,
            latent_patch: 2,
            link_plan: dlc::plan_links(2, 1).unwrap(),
            rgb_in_channels: 9,
            xyz_in_channels: 4,
            lora_rank: 2,
            lora_scale: 1.0,
            lora_init_std: 0.02,
            ffn_mult: 4,
        }
    }

    fn random_grid(c: usize, f: usize, h: usize, w: usize, seed: u64) -> LatentGrid {
        let mut r = rng::from_seed(seed);
        LatentGrid::new(c, f, h, w, rng::normal_vec(&mut r, c * f * h * w)).unwrap()
    }

    #[test]
    fn patchify_roundtrip_and_shapes() {
        let g = random_grid(3, 2, 4, 6, 1);
        let ts = patchify(&g, 2).unwrap();
        assert_eq!(ts.tokens.rows, 2 * 2 * 3);
        assert_eq!(ts.tokens.cols, 12);
        assert_eq!(ts.origin, (2, 2, 3));
        let back = unpatchify(&ts, 3, 2).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn assemble_input_layout() {
        let z = random_grid(48, 9, 8, 8, 2);
        let c = random_grid(48, 9, 8, 8, 3);
        let m = random_grid(16, 9, 8, 8, 4);
        let all = assemble_input(&z, &c, &m).unwrap();
        assert_eq!(all.shape(), (112, 9, 8, 8));
        assert_eq!(&all.data[..z.len()], &z.data[..]);
        assert_eq!(&all.data[z.len()..z.len() + c.len()], &c.data[..]);

        // zero conditioning and mask: first block is z, rest zero
        let zc = c.zeros_like();
        let zm = m.zeros_like();
        let packed = assemble_input(&z, &zc, &zm).unwrap();
        assert_eq!(&packed.data[..z.len()], &z.data[..]);
        assert!(packed.data[z.len()..].iter().all(|&v| v == 0.0));

        let bad = random_grid(48, 8, 8, 8, 5);
        assert!(assemble_input(&z, &bad, &m).is_err());
    }

    #[test]
    fn output_shapes_match_inputs() {
        let cfg = BackboneConfig::toy(112, 48);
        let model = DualBackbone::new(cfg, 7).unwrap();
        let z_in = random_grid(112, 2, 4, 4, 8);
        let z_xyz = random_grid(48, 2, 4, 4, 9);
        let (vr, vx) = model.dual_forward(&z_in, &z_xyz, 0.5).unwrap();
        assert_eq!(vr.shape(), (48, 2, 4, 4));
        assert_eq!(vx.shape(), (48, 2, 4, 4));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = DualBackbone::new(mini_cfg(), 3).unwrap();
        let z_in = random_grid(9, 2, 4, 4, 10);
        let z_xyz = random_grid(4, 2, 4, 4, 11);
        let (a1, a2) = model.dual_forward(&z_in, &z_xyz, 0.3).unwrap();
        let (b1, b2) = model.dual_forward(&z_in, &z_xyz, 0.3).unwrap();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    /// At init (zero up-factors, zero links) the RGB output ignores the XYZ
    /// input entirely, bit-for-bit.
    #[test]
    fn cross_modal_isolation_at_init() {
        let model = DualBackbone::new(mini_cfg(), 42).unwrap();
        let z_in = random_grid(9, 2, 4, 4, 12);
        let z_xyz_a = random_grid(4, 2, 4, 4, 13);
        let z_xyz_b = random_grid(4, 2, 4, 4, 14);
        let (vr_a, _) = model.dual_forward(&z_in, &z_xyz_a, 0.5).unwrap();
        let (vr_b, _) = model.dual_forward(&z_in, &z_xyz_b, 0.5).unwrap();
        for (x, y) in vr_a.data.iter().zip(vr_b.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    /// At init, a model with links present equals one with no links at all.
    #[test]
    fn links_present_vs_removed_at_init() {
        let with = DualBackbone::new(mini_cfg(), 42).unwrap();
        let mut cfg = mini_cfg();
        cfg.link_plan = LinkPlan::empty(cfg.layers);
        let without = DualBackbone::new(cfg, 42).unwrap();
        let z_in = random_grid(9, 2, 4, 4, 15);
        let z_xyz = random_grid(4, 2, 4, 4, 16);
        let (ar, ax) = with.dual_forward(&z_in, &z_xyz, 0.25).unwrap();
        let (br, bx) = without.dual_forward(&z_in, &z_xyz, 0.25).unwrap();
        for (x, y) in ar.data.iter().zip(br.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in ax.data.iter().zip(bx.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    /// With zero adapters and zero links, the dual RGB branch equals the
    /// frozen base forward bit-exactly.
    #[test]
    fn decoupling_identity() {
        let mut model = DualBackbone::new(mini_cfg(), 5).unwrap();
        model.zero_stream_adapters(Stream::Rgb);
        model.zero_stream_adapters(Stream::Xyz);
        model.zero_links();
        let z_in = random_grid(9, 2, 4, 4, 17);
        let z_xyz = random_grid(4, 2, 4, 4, 18);
        let (vr, vx) = model.dual_forward(&z_in, &z_xyz, 0.75).unwrap();
        let base_r = model.base_forward_stream(&z_in, 0.75, Stream::Rgb).unwrap();
        let base_x = model.base_forward_stream(&z_xyz, 0.75, Stream::Xyz).unwrap();
        for (x, y) in vr.data.iter().zip(base_r.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in vx.data.iter().zip(base_x.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    /// Mutating an RGB adapter never changes XYZ outputs while links are 0.
    #[test]
    fn weight_sharing_isolation() {
        let mut model = DualBackbone::new(mini_cfg(), 6).unwrap();
        let z_in = random_grid(9, 2, 4, 4, 19);
        let z_xyz = random_grid(4, 2, 4, 4, 20);
        let (_, vx_before) = model.dual_forward(&z_in, &z_xyz, 0.5).unwrap();
        let t = model.trainable.by_name_mut("lora.rgb.layer01.wq.up").unwrap();
        for v in t.value.iter_mut() {
            *v = 0.37;
        }
        let (_, vx_after) = model.dual_forward(&z_in, &z_xyz, 0.5).unwrap();
        for (x, y) in vx_before.data.iter().zip(vx_after.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    /// With a symmetric base (shared projections) and zero links, swapping
    /// the two streams' adapters swaps which stream is adapted.
    #[test]
    fn adapter_swap_symmetry() {
        let mut cfg = mini_cfg();
        cfg.rgb_in_channels = 4;
        cfg.link_plan = LinkPlan::empty(cfg.layers);
        let mut model = DualBackbone::new(cfg, 30).unwrap();
        // make the base symmetric: copy rgb projections into xyz
        let in_w = model.base.by_name("base.in_rgb.w").unwrap().value.clone();
        let in_b = model.base.by_name("base.in_rgb.b").unwrap().value.clone();
        model.base.by_name_mut("base.in_xyz.w").unwrap().value = in_w;
        model.base.by_name_mut("base.in_xyz.b").unwrap().value = in_b;
        let out_w = model.base.by_name("base.out_rgb.w").unwrap().value.clone();
        let out_b = model.base.by_name("base.out_rgb.b").unwrap().value.clone();
        model.base.by_name_mut("base.out_xyz.w").unwrap().value = out_w;
        model.base.by_name_mut("base.out_xyz.b").unwrap().value = out_b;
        // give both streams distinct, nonzero adapters
        let mut r = rng::from_seed(31);
        let names: alloc::vec::Vec<String> = model
            .trainable
            .iter()
            .filter(|t| t.name.starts_with("lora."))
            .map(|t| t.name.clone())
            .collect();
        for name in &names {
            let t = model.trainable.by_name_mut(name).unwrap();
            t.value = rng::normal_vec(&mut r, t.value.len());
        }
        let z = random_grid(4, 2, 4, 4, 32);
        let (vr_1, vx_1) = model.dual_forward(&z, &z, 0.4).unwrap();

        // swap the rgb and xyz adapter tensors
        for name in &names {
            if let Some(rest) = name.strip_prefix("lora.rgb.") {
                let other = format!("lora.xyz.{rest}");
                let a = model.trainable.by_name(name).unwrap().value.clone();
                let b = model.trainable.by_name(&other).unwrap().value.clone();
                model.trainable.by_name_mut(name).unwrap().value = b;
                model.trainable.by_name_mut(&other).unwrap().value = a;
            }
        }
        let (vr_2, vx_2) = model.dual_forward(&z, &z, 0.4).unwrap();
        for (a, b) in vr_1.data.iter().zip(vx_2.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in vx_1.data.iter().zip(vr_2.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Every trainable parameter gradient of the miniature model matches
    /// central differences. Parameters are randomized first so nothing sits
    /// at a measure-zero point (zero up-factors give exactly zero down
    /// gradients, which central differences confirm but weakly).
    #[test]
    fn miniature_gradients_match_central_differences() {
        let mut model = DualBackbone::new(mini_cfg(), 77).unwrap();
        let mut r = rng::from_seed(78);
        for t in model.trainable.iter_mut() {
            t.value = rng::normal_vec(&mut r, t.value.len())
                .iter()
                .map(|v| v * 0.05)
                .collect();
        }
        let z_in = random_grid(9, 2, 4, 4, 79);
        let z_xyz = random_grid(4, 2, 4, 4, 80);
        let tgt_r = random_grid(4, 2, 4, 4, 81);
        let tgt_x = random_grid(4, 2, 4, 4, 82);

        let names: alloc::vec::Vec<String> =
            model.trainable.iter().map(|t| t.name.clone()).collect();
        let shapes: alloc::vec::Vec<(usize, usize)> =
            model.trainable.iter().map(|t| (t.rows, t.cols)).collect();
        let values: alloc::vec::Vec<alloc::vec::Vec<f64>> =
            model.trainable.iter().map(|t| t.value.clone()).collect();

        // Loss as a function of the trainable values, rebuilt via the model.
        let builder = move |tape: &mut Tape,
                            params: &[alloc::vec::Vec<f64>]|
              -> Result<(Var, alloc::vec::Vec<Var>)> {
            // Rebind a fresh model with the given parameter values.
            let mut m = DualBackbone::new(mini_cfg(), 77)?;
            for (i, name) in names.iter().enumerate() {
                m.trainable.by_name_mut(name).unwrap().value = params[i].clone();
            }
            let rgb_tokens = patchify(&z_in, 2)?;
            let xyz_tokens = patchify(&z_xyz, 2)?;
            let tgt_r_tok = patchify(&tgt_r, 2)?;
            let tgt_x_tok = patchify(&tgt_x, 2)?;
            let bb = DualBackbone::bind_set(tape, &m.base, false)?;
            let bt = DualBackbone::bind_set(tape, &m.trainable, true)?;
            let rt = tape.constant_mat(&rgb_tokens.tokens)?;
            let xt = tape.constant_mat(&xyz_tokens.tokens)?;
            let (out_r, out_x) = m.forward_on_tape(tape, &bb, &bt, rt, xt, 0.35)?;
            let tr = tape.constant_mat(&tgt_r_tok.tokens)?;
            let tx = tape.constant_mat(&tgt_x_tok.tokens)?;
            let dr = tape.sub(out_r, tr)?;
            let sr = tape.mul(dr, dr)?;
            let mr = tape.mean(sr)?;
            let dx = tape.sub(out_x, tx)?;
            let sx = tape.mul(dx, dx)?;
            let mx = tape.mean(sx)?;
            let loss = tape.add(mr, mx)?;
            let _ = &shapes;
            Ok((loss, bt))
        };

        // Spot-check a subset of tensors exhaustively (full coverage runs in
        // the acceptance suite).
        let subset: alloc::vec::Vec<usize> = alloc::vec![0, 3, 9, 20, 40, values.len() - 1];
        let mut partial: alloc::vec::Vec<alloc::vec::Vec<f64>> = values.clone();
        for &i in &subset {
            partial[i] = values[i].clone();
        }
        gradcheck::check_subset(&builder, &partial, &subset, 1e-4).unwrap();
    }

    #[test]
    fn backward_loss_runs_and_matches_forward() {
        let mut model = DualBackbone::new(mini_cfg(), 90).unwrap();
        let z_in = random_grid(9, 2, 4, 4, 91);
        let z_xyz = random_grid(4, 2, 4, 4, 92);
        let tgt_r = random_grid(4, 2, 4, 4, 93);
        let tgt_x = random_grid(4, 2, 4, 4, 94);
        model.trainable.zero_grad();
        let loss = model
            .backward_loss(&z_in, &z_xyz, 0.6, &tgt_r, &tgt_x)
            .unwrap();
        // loss value agrees with the plain forward + fm_loss route
        let (vr, vx) = model.dual_forward(&z_in, &z_xyz, 0.6).unwrap();
        let expect = crate::flow::fm_loss(&vr, &tgt_r, &vx, &tgt_x).unwrap();
        assert!((loss - expect).abs() < 1e-12);
        // up-factor gradients are nonzero at init; some gradient flowed
        let g = &model.trainable.by_name("lora.rgb.out.up").unwrap().grad;
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rejects_bad_t_and_shapes() {
        let model = DualBackbone::new(mini_cfg(), 1).unwrap();
        let z_in = random_grid(9, 2, 4, 4, 2);
        let z_xyz = random_grid(4, 2, 4, 4, 3);
        assert!(matches!(
            model.dual_forward(&z_in, &z_xyz, 1.5),
            Err(Error::Domain(_))
        ));
        let wrong = random_grid(5, 2, 4, 4, 4);
        assert!(matches!(
            model.dual_forward(&z_in, &wrong, 0.5),
            Err(Error::Dimension(_))
        ));
    }
}
