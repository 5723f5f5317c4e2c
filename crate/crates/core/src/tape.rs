//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] is an append-only list of nodes. Every constructor evaluates
//! its value eagerly, checks it for non-finite entries (naming the primitive
//! on failure), and records enough structure for [`Tape::backward`] to fill
//! exact gradients by walking the list in reverse. Matrices are row-major;
//! a scalar is a 1x1 matrix.
//!
//! Subgradient conventions: `abs` and the Euclidean norm use 0 at 0.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::mat::{self, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    /// Matrix times a 1x1 scalar variable.
    ScaleBy(Var, Var),
    Recip(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Silu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    /// (m x n) + (1 x n), broadcast over rows.
    AddRow(Var, Var),
    /// (m x n) * (1 x n), broadcast over rows.
    MulRow(Var, Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    /// Row-wise layer norm without affine parameters; payload is epsilon.
    LayerNormRows(Var, f64),
    /// Euclidean norm of all entries (Frobenius for matrices).
    Norm2(Var),
    /// Quaternion (x, y, z, w), any 4-element shape, to a 3x3 rotation
    /// matrix; normalizes internally.
    QuatToRot(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::ScaleBy(..) => "scale_by",
            Op::Recip(..) => "recip",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Abs(..) => "abs",
            Op::Silu(..) => "silu",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::Norm2(..) => "norm2",
            Op::QuatToRot(..) => "quat_to_rot",
        }
    }
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for a variable, if it participated in the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref().map(|b| b.as_slice()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn value_as_mat(&self, v: Var) -> Mat {
        let n = &self.nodes[v.0];
        Mat {
            rows: n.rows,
            cols: n.cols,
            data: n.value.clone(),
        }
    }

    /// A leaf that does not receive a gradient (inputs, frozen weights).
    pub fn constant(&mut self, rows: usize, cols: usize, data: &[f64]) -> Result<Var> {
        self.leaf(rows, cols, data, false)
    }

    pub fn constant_mat(&mut self, m: &Mat) -> Result<Var> {
        self.leaf(m.rows, m.cols, &m.data, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<Var> {
        self.leaf(1, 1, &[v], false)
    }

    /// A leaf that receives a gradient (trainable parameters).
    pub fn param(&mut self, rows: usize, cols: usize, data: &[f64]) -> Result<Var> {
        self.leaf(rows, cols, data, true)
    }

    pub fn param_mat(&mut self, m: &Mat) -> Result<Var> {
        self.leaf(m.rows, m.cols, &m.data, true)
    }

    fn leaf(&mut self, rows: usize, cols: usize, data: &[f64], needs_grad: bool) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "leaf: data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        self.push(Op::Leaf, rows, cols, data.to_vec(), needs_grad)
    }

    fn push(
        &mut self,
        op: Op,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        needs_grad: bool,
    ) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value produced by primitive `{}`",
                op.name()
            )));
        }
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, opname: &str) -> Result<(usize, usize)> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Dimension(format!(
                "{opname}: {ra}x{ca} vs {rb}x{cb}"
            )));
        }
        Ok((ra, ca))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), r, c, v, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), r, c, v, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), r, c, v, ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + s).collect();
        let ng = self.needs(a);
        self.push(Op::AddScalar(a), r, c, v, ng)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        let ng = self.needs(a);
        self.push(Op::MulScalar(a, s), r, c, v, ng)
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (sr, sc) = self.shape(s);
        if (sr, sc) != (1, 1) {
            return Err(Error::Dimension(format!(
                "scale_by: scale must be 1x1, got {sr}x{sc}"
            )));
        }
        let sv = self.nodes[s.0].value[0];
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * sv).collect();
        let ng = self.needs(a) || self.needs(s);
        self.push(Op::ScaleBy(a, s), r, c, v, ng)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| 1.0 / x).collect();
        let ng = self.needs(a);
        self.push(Op::Recip(a), r, c, v, ng)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| fmath::exp(x))
            .collect();
        let ng = self.needs(a);
        self.push(Op::Exp(a), r, c, v, ng)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| fmath::ln(x))
            .collect();
        let ng = self.needs(a);
        self.push(Op::Ln(a), r, c, v, ng)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| fmath::abs(x))
            .collect();
        let ng = self.needs(a);
        self.push(Op::Abs(a), r, c, v, ng)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let ng = self.needs(a);
        self.push(Op::Silu(a), r, c, v, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (kb, n) = self.shape(b);
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul: {m}x{k} times {kb}x{n}"
            )));
        }
        let mut v = vec![0.0; m * n];
        mat::matmul_into(
            &self.nodes[a.0].value,
            m,
            k,
            &self.nodes[b.0].value,
            n,
            &mut v,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), m, n, v, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                v[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(Op::Transpose(a), n, m, v, ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != n {
            return Err(Error::Dimension(format!(
                "add_row: matrix is {m}x{n} but row is {rr}x{rc}"
            )));
        }
        let mut v = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].value;
            let rowv = &self.nodes[row.0].value;
            for i in 0..m {
                for j in 0..n {
                    v[i * n + j] = av[i * n + j] + rowv[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::AddRow(a, row), m, n, v, ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != n {
            return Err(Error::Dimension(format!(
                "mul_row: matrix is {m}x{n} but row is {rr}x{rc}"
            )));
        }
        let mut v = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].value;
            let rowv = &self.nodes[row.0].value;
            for i in 0..m {
                for j in 0..n {
                    v[i * n + j] = av[i * n + j] * rowv[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::MulRow(a, row), m, n, v, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start >= end || end > n {
            return Err(Error::Dimension(format!(
                "slice_cols: [{start}, {end}) out of 0..{n}"
            )));
        }
        let w = end - start;
        let src = &self.nodes[a.0].value;
        let mut v = vec![0.0; m * w];
        for i in 0..m {
            v[i * w..(i + 1) * w].copy_from_slice(&src[i * n + start..i * n + end]);
        }
        let ng = self.needs(a);
        self.push(Op::SliceCols(a, start, end), m, w, v, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.shape(a);
        let (mb, nb) = self.shape(b);
        if ma != mb {
            return Err(Error::Dimension(format!(
                "concat_cols: {ma} rows vs {mb} rows"
            )));
        }
        let n = na + nb;
        let mut v = vec![0.0; ma * n];
        for i in 0..ma {
            v[i * n..i * n + na].copy_from_slice(&self.nodes[a.0].value[i * na..(i + 1) * na]);
            v[i * n + na..(i + 1) * n]
                .copy_from_slice(&self.nodes[b.0].value[i * nb..(i + 1) * nb]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a, b), ma, n, v, ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), 1, 1, vec![s], ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let len = self.nodes[a.0].value.len();
        if len == 0 {
            return Err(Error::Domain("mean: empty matrix".into()));
        }
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let ng = self.needs(a);
        self.push(Op::Mean(a), 1, 1, vec![s / len as f64], ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let mut s = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = fmath::exp(x - mx);
                v[i * n + j] = e;
                s += e;
            }
            for j in 0..n {
                v[i * n + j] /= s;
            }
        }
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), m, n, v, ng)
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(a);
        if n == 0 {
            return Err(Error::Domain("layer_norm_rows: empty rows".into()));
        }
        let src = &self.nodes[a.0].value;
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / fmath::sqrt(var + eps);
            for j in 0..n {
                v[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let ng = self.needs(a);
        self.push(Op::LayerNormRows(a, eps), m, n, v, ng)
    }

    pub fn norm2(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.iter().map(|x| x * x).sum();
        let ng = self.needs(a);
        self.push(Op::Norm2(a), 1, 1, vec![fmath::sqrt(s)], ng)
    }

    pub fn quat_to_rot(&mut self, q: Var) -> Result<Var> {
        let n = &self.nodes[q.0];
        if n.value.len() != 4 {
            return Err(Error::Dimension(format!(
                "quat_to_rot: expected 4 elements, got {}",
                n.value.len()
            )));
        }
        let norm = fmath::sqrt(n.value.iter().map(|x| x * x).sum());
        if norm == 0.0 {
            return Err(Error::Numeric(
                "quat_to_rot: zero quaternion cannot be normalized".into(),
            ));
        }
        let qn: Vec<f64> = n.value.iter().map(|x| x / norm).collect();
        let v = rot_from_unit_quat(&qn).to_vec();
        let ng = self.needs(q);
        self.push(Op::QuatToRot(q), 3, 3, v, ng)
    }

    /// Reverse-mode gradient of a scalar `loss` with respect to every
    /// gradient-requiring leaf that feeds it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Domain(format!(
                "backward: loss must be a scalar, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at primitive `{}`",
                    self.nodes[i].op.name()
                )));
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        slot.as_mut()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let bv = self.nodes[b.0].value.clone();
                    let ga = self.acc(grads, a).unwrap();
                    for ((x, y), bvv) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += y * bvv;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.nodes[a.0].value.clone();
                    let gb = self.acc(grads, b).unwrap();
                    for ((x, y), avv) in gb.iter_mut().zip(g).zip(&av) {
                        *x += y * avv;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y * s;
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let sv = self.nodes[s.0].value[0];
                if self.nodes[a.0].needs_grad {
                    let ga = self.acc(grads, a).unwrap();
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y * sv;
                    }
                }
                if self.nodes[s.0].needs_grad {
                    let av = self.nodes[a.0].value.clone();
                    let gs = self.acc(grads, s).unwrap();
                    let mut acc = 0.0;
                    for (y, avv) in g.iter().zip(&av) {
                        acc += y * avv;
                    }
                    gs[0] += acc;
                }
            }
            Op::Recip(a) => {
                if self.nodes[a.0].needs_grad {
                    let av = self.nodes[a.0].value.clone();
                    let ga = self.acc(grads, a).unwrap();
                    for ((x, y), avv) in ga.iter_mut().zip(g).zip(&av) {
                        *x -= y / (avv * avv);
                    }
                }
            }
            Op::Exp(a) => {
                if self.nodes[a.0].needs_grad {
                    let out = node.value.clone();
                    let ga = self.acc(grads, a).unwrap();
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(&out) {
                        *x += y * o;
                    }
                }
            }
            Op::Ln(a) => {
                if self.nodes[a.0].needs_grad {
                    let av = self.nodes[a.0].value.clone();
                    let ga = self.acc(grads, a).unwrap();
                    for ((x, y), avv) in ga.iter_mut().zip(g).zip(&av) {
                        *x += y / avv;
                    }
                }
            }
            Op::Abs(a) => {
                if self.nodes[a.0].needs_grad {
                    let av = self.nodes[a.0].value.clone();
                    let ga = self.acc(grads, a).unwrap();
                    for ((x, y), avv) in ga.iter_mut().zip(g).zip(&av) {
                        // subgradient at 0 is 0
                        let s = if *avv > 0.0 {
                            1.0
                        } else if *avv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *x += y * s;
                    }
                }
            }
            Op::Silu(a) => {
                if self.nodes[a.0].needs_grad {
                    let av = self.nodes[a.0].value.clone();
                    let ga = self.acc(grads, a).unwrap();
                    for ((x, y), avv) in ga.iter_mut().zip(g).zip(&av) {
                        let s = sigmoid(*avv);
                        *x += y * (s * (1.0 + avv * (1.0 - s)));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                if self.nodes[a.0].needs_grad {
                    let bv = self.nodes[b.0].value.clone();
                    let ga = self.acc(grads, a).unwrap();
                    // dA += G * B^T
                    mat::matmul_nt_acc(g, m, n, &bv, k, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.nodes[a.0].value.clone();
                    let gb = self.acc(grads, b).unwrap();
                    // dB += A^T * G
                    mat::matmul_tn_acc(&av, m, k, g, n, gb);
                }
            }
            Op::Transpose(a) => {
                if self.nodes[a.0].needs_grad {
                    let (n, m) = (node.rows, node.cols); // output shape
                    let ga = self.acc(grads, a).unwrap();
                    for i in 0..n {
                        for j in 0..m {
                            ga[j * n + i] += g[i * m + j];
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                let n = node.cols;
                if let Some(ga) = self.acc(grads, a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gr) = self.acc(grads, row) {
                    for (i, y) in g.iter().enumerate() {
                        gr[i % n] += y;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let n = node.cols;
                if self.nodes[a.0].needs_grad {
                    let rv = self.nodes[row.0].value.clone();
                    let ga = self.acc(grads, a).unwrap();
                    for (i, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                        *x += y * rv[i % n];
                    }
                }
                if self.nodes[row.0].needs_grad {
                    let av = self.nodes[a.0].value.clone();
                    let gr = self.acc(grads, row).unwrap();
                    for (i, y) in g.iter().enumerate() {
                        gr[i % n] += y * av[i];
                    }
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.nodes[a.0].needs_grad {
                    let (_, an) = self.shape(a);
                    let w = end - start;
                    let m = node.rows;
                    let ga = self.acc(grads, a).unwrap();
                    for i in 0..m {
                        for j in 0..w {
                            ga[i * an + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, n) = (node.rows, node.cols);
                let (_, na) = self.shape(a);
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        for j in 0..na {
                            ga[i * na + j] += g[i * n + j];
                        }
                    }
                }
                let nb = n - na;
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..m {
                        for j in 0..nb {
                            gb[i * nb + j] += g[i * n + na + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if self.nodes[a.0].needs_grad {
                    let len = self.nodes[a.0].value.len() as f64;
                    let ga = self.acc(grads, a).unwrap();
                    let gv = g[0] / len;
                    for x in ga.iter_mut() {
                        *x += gv;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.nodes[a.0].needs_grad {
                    let (m, n) = (node.rows, node.cols);
                    let p = node.value.clone();
                    let ga = self.acc(grads, a).unwrap();
                    for i in 0..m {
                        let prow = &p[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let dot: f64 = prow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            ga[i * n + j] += prow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows(a, eps) => {
                if self.nodes[a.0].needs_grad {
                    let (m, n) = (node.rows, node.cols);
                    let y = node.value.clone();
                    let src = self.nodes[a.0].value.clone();
                    let ga = self.acc(grads, a).unwrap();
                    for i in 0..m {
                        let row = &src[i * n..(i + 1) * n];
                        let yrow = &y[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / fmath::sqrt(var + eps);
                        let gmean = grow.iter().sum::<f64>() / n as f64;
                        let gydot =
                            grow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / n as f64;
                        for j in 0..n {
                            ga[i * n + j] += inv * (grow[j] - gmean - yrow[j] * gydot);
                        }
                    }
                }
            }
            Op::Norm2(a) => {
                if self.nodes[a.0].needs_grad {
                    let norm = node.value[0];
                    let av = self.nodes[a.0].value.clone();
                    let ga = self.acc(grads, a).unwrap();
                    if norm > 0.0 {
                        for (x, avv) in ga.iter_mut().zip(&av) {
                            *x += g[0] * avv / norm;
                        }
                    }
                    // subgradient at 0 is 0: nothing to add
                }
            }
            Op::QuatToRot(q) => {
                if self.nodes[q.0].needs_grad {
                    let qv = self.nodes[q.0].value.clone();
                    let norm = fmath::sqrt(qv.iter().map(|x| x * x).sum());
                    let qn: Vec<f64> = qv.iter().map(|x| x / norm).collect();
                    let (x, y, z, w) = (qn[0], qn[1], qn[2], qn[3]);
                    let (g00, g01, g02) = (g[0], g[1], g[2]);
                    let (g10, g11, g12) = (g[3], g[4], g[5]);
                    let (g20, g21, g22) = (g[6], g[7], g[8]);
                    // d(loss)/d(qn) from the entries of R(qn)
                    let dqn = [
                        2.0 * y * (g01 + g10) + 2.0 * z * (g02 + g20) - 4.0 * x * (g11 + g22)
                            + 2.0 * w * (g12 - g21),
                        -4.0 * y * (g00 + g22)
                            + 2.0 * x * (g01 + g10)
                            + 2.0 * z * (g12 + g21)
                            + 2.0 * w * (g20 - g02),
                        -4.0 * z * (g00 + g11)
                            + 2.0 * x * (g02 + g20)
                            + 2.0 * y * (g12 + g21)
                            + 2.0 * w * (g01 - g10),
                        2.0 * x * (g12 - g21) + 2.0 * y * (g20 - g02) + 2.0 * z * (g01 - g10),
                    ];
                    // project through normalization: dq = (I - qn qn^T) dqn / norm
                    let dot: f64 = qn.iter().zip(&dqn).map(|(a, b)| a * b).sum();
                    let gq = self.acc(grads, q).unwrap();
                    for j in 0..4 {
                        gq[j] += (dqn[j] - qn[j] * dot) / norm;
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + fmath::exp(-x))
}

/// Rotation matrix of a unit quaternion (x, y, z, w), row-major.
pub fn rot_from_unit_quat(q: &[f64]) -> [f64; 9] {
    let (x, y, z, w) = (q[0], q[1], q[2], q[3]);
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y + z * w),
        2.0 * (x * z - y * w),
        2.0 * (x * y - z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z + x * w),
        2.0 * (x * z + y * w),
        2.0 * (y * z - x * w),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

pub mod gradcheck {
    //! Central-difference gradient checking harness. Used by the module
    //! tests that declare differentiability and by the acceptance suite.

    use super::*;
    use alloc::vec::Vec;

    /// Builds a scalar loss from parameter values; returns the loss var and
    /// the tape vars of the parameters, in order.
    pub trait LossBuilder {
        fn build(&self, tape: &mut Tape, params: &[Vec<f64>]) -> Result<(Var, Vec<Var>)>;
    }

    impl<F> LossBuilder for F
    where
        F: Fn(&mut Tape, &[Vec<f64>]) -> Result<(Var, Vec<Var>)>,
    {
        fn build(&self, tape: &mut Tape, params: &[Vec<f64>]) -> Result<(Var, Vec<Var>)> {
            self(tape, params)
        }
    }

    fn eval_loss<B: LossBuilder>(builder: &B, params: &[Vec<f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = builder.build(&mut tape, params)?;
        Ok(tape.scalar_value(loss))
    }

    /// Checks analytic gradients against central differences at `h = 1e-5`,
    /// requiring relative agreement `tol` (denominator floored to avoid
    /// 0/0). Returns the number of scalar parameters checked.
    pub fn check<B: LossBuilder>(builder: &B, params: &[Vec<f64>], tol: f64) -> Result<usize> {
        let all: Vec<usize> = (0..params.len()).collect();
        check_subset(builder, params, &all, tol)
    }

    /// Like [`check`] but only differencing the parameter tensors listed in
    /// `subset` (each checked exhaustively).
    pub fn check_subset<B: LossBuilder>(
        builder: &B,
        params: &[Vec<f64>],
        subset: &[usize],
        tol: f64,
    ) -> Result<usize> {
        let mut tape = Tape::new();
        let (loss, vars) = builder.build(&mut tape, params)?;
        let grads = tape.backward(loss)?;
        let h = 1e-5;
        let mut checked = 0;
        for &pi in subset {
            let analytic = match grads.get(vars[pi]) {
                Some(g) => g.to_vec(),
                None => alloc::vec![0.0; params[pi].len()],
            };
            for ei in 0..params[pi].len() {
                let mut plus = params.to_vec();
                plus[pi][ei] += h;
                let mut minus = params.to_vec();
                minus[pi][ei] -= h;
                let fd = (eval_loss(builder, &plus)? - eval_loss(builder, &minus)?) / (2.0 * h);
                let denom = analytic[ei].abs().max(fd.abs()).max(1e-6);
                let rel = (analytic[ei] - fd).abs() / denom;
                if rel > tol {
                    return Err(Error::Numeric(format!(
                        "gradient mismatch at param {pi} elem {ei}: analytic {} vs central difference {} (rel {:.3e})",
                        analytic[ei], fd, rel
                    )));
                }
                checked += 1;
            }
        }
        Ok(checked)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck;
    use super::*;
    use crate::rng;
    use alloc::vec::Vec;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(1, 1, &[3.0]).unwrap();
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(1, 3, &[0.0, -2.0, 5.0]).unwrap();
        let a = tape.abs(x).unwrap();
        let s = tape.sum(a).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn norm2_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(1, 3, &[0.0, 0.0, 0.0]).unwrap();
        let n = tape.norm2(x).unwrap();
        let grads = tape.backward(n).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_is_reported_with_primitive() {
        let mut tape = Tape::new();
        let x = tape.constant(1, 1, &[-1.0]).unwrap();
        let err = tape.ln(x).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("ln"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.constant(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = tape.param(1, 2, &[1.0, 1.0]).unwrap();
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_some());
    }

    /// Random composite graph exercising every differentiable primitive,
    /// checked against central differences.
    #[test]
    fn composite_graph_matches_central_differences() {
        let mut r = rng::from_seed(11);
        let p0 = rng::normal_vec(&mut r, 12); // 3x4 matrix
        let p1 = rng::normal_vec(&mut r, 4); // 1x4 row
        let p2 = rng::normal_vec(&mut r, 1); // scalar
        let p3 = rng::normal_vec(&mut r, 16); // 4x4 matrix
        let params = alloc::vec![p0, p1, p2, p3];

        let builder = |tape: &mut Tape, params: &[Vec<f64>]| -> Result<(Var, Vec<Var>)> {
            let a = tape.param(3, 4, &params[0])?;
            let row = tape.param(1, 4, &params[1])?;
            let s = tape.param(1, 1, &params[2])?;
            let w = tape.param(4, 4, &params[3])?;

            let x = tape.add_row(a, row)?;
            let x = tape.mul_row(x, row)?;
            let x = tape.matmul(x, w)?;
            let x = tape.layer_norm_rows(x, 1e-6)?;
            let x = tape.softmax_rows(x)?;
            let x = tape.scale_by(x, s)?;
            let x = tape.silu(x)?;
            let left = tape.slice_cols(x, 0, 2)?;
            let right = tape.slice_cols(x, 2, 4)?;
            let t = tape.transpose(right)?;
            let prod = tape.matmul(left, t)?;
            let e = tape.exp(prod)?;
            let l = tape.ln(e)?;
            let ab = tape.abs(l)?;
            let n = tape.norm2(ab)?;
            let m = tape.mean(x)?;
            let sum2 = tape.add(n, m)?;
            let joined = tape.concat_cols(n, m)?;
            let js = tape.sum(joined)?;
            let total = tape.add(sum2, js)?;
            let scaled = tape.mul_scalar(total, 1.7)?;
            let shifted = tape.add_scalar(scaled, 0.3)?;
            Ok((shifted, alloc::vec![a, row, s, w]))
        };
        gradcheck::check(&builder, &params, 1e-4).unwrap();
    }

    #[test]
    fn quat_to_rot_matches_central_differences() {
        let mut r = rng::from_seed(5);
        for _ in 0..10 {
            let q = rng::normal_vec(&mut r, 4);
            let weights = rng::normal_vec(&mut r, 9);
            let params = alloc::vec![q];
            let w = weights.clone();
            let builder = move |tape: &mut Tape, params: &[Vec<f64>]| -> Result<(Var, Vec<Var>)> {
                let qv = tape.param(1, 4, &params[0])?;
                let rot = tape.quat_to_rot(qv)?;
                let wv = tape.constant(3, 3, &w)?;
                let prod = tape.mul(rot, wv)?;
                let s = tape.sum(prod)?;
                Ok((s, alloc::vec![qv]))
            };
            gradcheck::check(&builder, &params, 1e-4).unwrap();
        }
    }

    #[test]
    fn quat_rotation_is_orthonormal() {
        let mut r = rng::from_seed(9);
        let q = rng::normal_vec(&mut r, 4);
        let mut tape = Tape::new();
        let qv = tape.constant(1, 4, &q).unwrap();
        let rot = tape.quat_to_rot(qv).unwrap();
        let rt = tape.transpose(rot).unwrap();
        let prod = tape.matmul(rot, rt).unwrap();
        let v = tape.value(prod);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v[i * 3 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn recip_and_scale_by_gradients() {
        let params = alloc::vec![alloc::vec![1.7], alloc::vec![0.4, -0.3, 2.0]];
        let builder = |tape: &mut Tape, params: &[Vec<f64>]| -> Result<(Var, Vec<Var>)> {
            let f = tape.param(1, 1, &params[0])?;
            let x = tape.param(1, 3, &params[1])?;
            let rf = tape.recip(f)?;
            let scaled = tape.scale_by(x, rf)?;
            let sq = tape.mul(scaled, scaled)?;
            let s = tape.sum(sq)?;
            Ok((s, alloc::vec![f, x]))
        };
        gradcheck::check(&builder, &params, 1e-4).unwrap();
    }

    #[test]
    fn concat_cols_layout() {
        let mut tape = Tape::new();
        let a = tape.constant(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.constant(2, 1, &[5.0, 6.0]).unwrap();
        let c = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    }
}
