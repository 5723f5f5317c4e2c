//! Decoupled low-rank adaptation with cross-modal control: per-modality
//! low-rank adapters over shared frozen weights, and zero-initialized linear
//! links that exchange features between the two branches at selected layers.
//!
//! Zero initialization (up-factors and links) makes the two branches exactly
//! independent at the start of training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

/// A frozen linear map `y = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn gaussian(in_dim: usize, out_dim: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            weight: Mat::gaussian(in_dim, out_dim, std, rng),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols
    }
}

/// Low-rank adapter factors for one linear map. The up-factor starts at
/// zero so a fresh adapter leaves the base output untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub down: Mat,
    pub up: Mat,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    /// Seeded init: `down ~ N(0, std^2)`, `up = 0`.
    pub fn init(
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        scale: f64,
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if rank < 1 || rank > in_dim.min(out_dim) {
            return Err(Error::Domain(format!(
                "adapter rank {rank} outside [1, min({in_dim}, {out_dim})]"
            )));
        }
        Ok(Self {
            down: Mat::gaussian(in_dim, rank, std, rng),
            up: Mat::zeros(rank, out_dim),
            rank,
            scale,
        })
    }
}

/// Zero-initialized affine control link `y = x W + b` with `dim x dim`
/// weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlLink {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl ControlLink {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Mat::zeros(dim, dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.rows
    }
}

/// Which backbone layers carry control links. Indices are 1-based and
/// strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkPlan {
    indices: Vec<usize>,
    pub n_layers: usize,
}

impl LinkPlan {
    pub fn empty(n_layers: usize) -> Self {
        Self {
            indices: Vec::new(),
            n_layers,
        }
    }

    pub fn from_indices(indices: Vec<usize>, n_layers: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(
                "link plan indices must be strictly increasing".into(),
            ));
        }
        if indices.iter().any(|&i| i < 1 || i > n_layers) {
            return Err(Error::Domain(format!(
                "link plan indices must lie in [1, {n_layers}]"
            )));
        }
        Ok(Self { indices, n_layers })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.indices.binary_search(&layer).is_ok()
    }

    pub fn link_count(&self) -> usize {
        self.indices.len()
    }
}

/// Spread `m` link layers as evenly as possible over `{1..n}`:
/// `index_k = round(k*n/(m+1))` clamped to `[1, n]`, duplicates resolved by
/// incrementing. Deterministic.
pub fn plan_links(n: usize, m: usize) -> Result<LinkPlan> {
    if m < 1 || m > n {
        return Err(Error::Domain(format!(
            "link count {m} outside [1, {n}]"
        )));
    }
    let mut indices = Vec::with_capacity(m);
    let mut prev = 0usize;
    for k in 1..=m {
        let raw = crate::fmath::round(k as f64 * n as f64 / (m + 1) as f64) as usize;
        let mut idx = raw.clamp(1, n);
        if idx <= prev {
            idx = prev + 1;
        }
        debug_assert!(idx <= n);
        indices.push(idx);
        prev = idx;
    }
    LinkPlan::from_indices(indices, n)
}

/// Tape-level linear with optional low-rank adapter:
/// `x W + b + scale * ((x down) up)`. This is the single implementation
/// behind both the plain API below and the backbone forward.
pub(crate) fn tape_lora_linear(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Var,
    adapter: Option<(Var, Var, f64)>,
) -> Result<Var> {
    let base = tape.matmul(x, weight)?;
    let base = tape.add_row(base, bias)?;
    match adapter {
        None => Ok(base),
        Some((down, up, scale)) => {
            let mid = tape.matmul(x, down)?;
            let delta = tape.matmul(mid, up)?;
            let delta = tape.mul_scalar(delta, scale)?;
            tape.add(base, delta)
        }
    }
}

/// Tape-level control exchange of pre-exchange features:
/// `rgb' = rgb + (xyz W_rx + b_rx)`, `xyz' = xyz + (rgb W_xr + b_xr)`.
pub(crate) fn tape_control_exchange(
    tape: &mut Tape,
    z_rgb: Var,
    z_xyz: Var,
    rgb_from_xyz: (Var, Var),
    xyz_from_rgb: (Var, Var),
) -> Result<(Var, Var)> {
    let to_rgb = tape.matmul(z_xyz, rgb_from_xyz.0)?;
    let to_rgb = tape.add_row(to_rgb, rgb_from_xyz.1)?;
    let to_xyz = tape.matmul(z_rgb, xyz_from_rgb.0)?;
    let to_xyz = tape.add_row(to_xyz, xyz_from_rgb.1)?;
    let new_rgb = tape.add(z_rgb, to_rgb)?;
    let new_xyz = tape.add(z_xyz, to_xyz)?;
    Ok((new_rgb, new_xyz))
}

/// `base(x) + scale * (x down up)` for a token matrix `x` (rows = tokens).
/// The base weights are never touched. `label` names the submodule in
/// errors.
pub fn lora_forward(label: &str, base: &Linear, adapter: &LoraAdapter, x: &Mat) -> Result<Mat> {
    if x.cols != base.in_dim() {
        return Err(Error::Dimension(format!(
            "{label}: input has {} columns but the base map expects {}",
            x.cols,
            base.in_dim()
        )));
    }
    if adapter.down.rows != base.in_dim() || adapter.up.cols != base.out_dim() {
        return Err(Error::Dimension(format!(
            "{label}: adapter is {}x{}->{}x{} but the base map is {}x{}",
            adapter.down.rows,
            adapter.down.cols,
            adapter.up.rows,
            adapter.up.cols,
            base.in_dim(),
            base.out_dim()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant_mat(x)?;
    let w = tape.constant_mat(&base.weight)?;
    let b = tape.constant(1, base.out_dim(), &base.bias)?;
    let down = tape.constant_mat(&adapter.down)?;
    let up = tape.constant_mat(&adapter.up)?;
    let y = tape_lora_linear(&mut tape, xv, w, b, Some((down, up, adapter.scale)))?;
    Ok(tape.value_as_mat(y))
}

/// The pre-exchange update pair: both outputs read the unmodified inputs.
pub fn control_exchange(
    z_rgb: &Mat,
    z_xyz: &Mat,
    links: (&ControlLink, &ControlLink),
) -> Result<(Mat, Mat)> {
    if z_rgb.rows != z_xyz.rows || z_rgb.cols != z_xyz.cols {
        return Err(Error::Dimension(format!(
            "control_exchange: token shapes {}x{} vs {}x{}",
            z_rgb.rows, z_rgb.cols, z_xyz.rows, z_xyz.cols
        )));
    }
    let (rgb_from_xyz, xyz_from_rgb) = links;
    if rgb_from_xyz.dim() != z_rgb.cols || xyz_from_rgb.dim() != z_rgb.cols {
        return Err(Error::Dimension(format!(
            "control_exchange: link dim {} does not match token dim {}",
            rgb_from_xyz.dim(),
            z_rgb.cols
        )));
    }
    let mut tape = Tape::new();
    let rv = tape.constant_mat(z_rgb)?;
    let xv = tape.constant_mat(z_xyz)?;
    let w_rx = tape.constant_mat(&rgb_from_xyz.weight)?;
    let b_rx = tape.constant(1, rgb_from_xyz.dim(), &rgb_from_xyz.bias)?;
    let w_xr = tape.constant_mat(&xyz_from_rgb.weight)?;
    let b_xr = tape.constant(1, xyz_from_rgb.dim(), &xyz_from_rgb.bias)?;
    let (nr, nx) = tape_control_exchange(&mut tape, rv, xv, (w_rx, b_rx), (w_xr, b_xr))?;
    Ok((tape.value_as_mat(nr), tape.value_as_mat(nx)))
}
