//! Tape-based reverse-mode differentiation over small dense matrices.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products. Nodes
//! built only from constants are marked as not requiring gradients and are
//! skipped during the backward sweep.

use super::matrix::{matmul_nt_into, matmul_tn_into, Matrix};
use super::params::{Gradients, ParameterSet, Tensor};
use super::NnError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    MaskRows(Var, Vec<bool>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    Sum(Var),
    AddN(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, usize)>,
}

/// Gradients of one backward sweep, indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &str, a: &Matrix, b: &Matrix) -> NnError {
    NnError::Shape(format!("{op}: {}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// The single value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Binds parameter `index` of a [`ParameterSet`] as a differentiable leaf.
    pub fn param(&mut self, index: usize, tensor: &Tensor) -> Var {
        let v = self.push(tensor.to_matrix(), Op::Leaf, true);
        self.params.push((v, index));
        v
    }

    /// Binds every tensor of `params`, returning leaves in parameter order.
    pub fn bind_all(&mut self, params: &ParameterSet) -> Vec<Var> {
        params.tensors().enumerate().map(|(i, t)| self.param(i, t)).collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let value = Matrix { rows: x.rows, cols: x.cols, data };
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (x, y) = (self.value(a), self.value(b));
        if y.rows != 1 || y.cols != x.cols {
            return Err(shape_err("add_row", x, y));
        }
        let mut value = x.clone();
        for row in value.data.chunks_mut(x.cols.max(1)) {
            for (v, bv) in row.iter_mut().zip(&y.data) {
                *v += bv;
            }
        }
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::AddRow(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", x, y));
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let value = Matrix { rows: x.rows, cols: x.cols, data };
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let value = Matrix { rows: x.rows, cols: x.cols, data: x.data.iter().map(|v| v * c).collect() };
        let g = self.needs(a);
        self.push(value, Op::Scale(a, c), g)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let value = Matrix { rows: x.rows, cols: x.cols, data: x.data.iter().map(|&v| f(v)).collect() };
        let g = self.needs(a);
        self.push(value, op, g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(a))
    }

    /// Concatenates along columns; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows != rows) {
            return Err(shape_err("concat", self.value(parts[0]), self.value(*bad)));
        }
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let m = self.value(*p);
                value.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        let g = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), g))
    }

    /// Columns `start..start + width` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, NnError> {
        let x = self.value(a);
        if start + width > x.cols {
            return Err(NnError::Shape(format!("slice {start}..{} of {} columns", start + width, x.cols)));
        }
        let mut value = Matrix::zeros(x.rows, width);
        for r in 0..x.rows {
            value.data[r * width..(r + 1) * width].copy_from_slice(&x.row(r)[start..start + width]);
        }
        let g = self.needs(a);
        Ok(self.push(value, Op::Slice(a, start), g))
    }

    /// Zeroes the rows whose mask entry is false.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var, NnError> {
        let x = self.value(a);
        if mask.len() != x.rows {
            return Err(NnError::Shape(format!("row mask of length {} for {} rows", mask.len(), x.rows)));
        }
        let mut value = x.clone();
        for (r, keep) in mask.iter().enumerate() {
            if !keep {
                value.data[r * x.cols..(r + 1) * x.cols].fill(0.0);
            }
        }
        let g = self.needs(a);
        Ok(self.push(value, Op::MaskRows(a, mask.to_vec()), g))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NnError> {
        let x = self.value(a);
        if rows * cols != x.len() {
            return Err(NnError::Shape(format!("reshape {}x{} to {rows}x{cols}", x.rows, x.cols)));
        }
        let value = Matrix { rows, cols, data: x.data.clone() };
        let g = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), g))
    }

    /// Softmax of a row vector. Masked-out entries are exactly zero and the
    /// remaining ones are normalised among themselves.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, NnError> {
        let x = self.value(a);
        if x.rows != 1 {
            return Err(NnError::Shape(format!("softmax expects a row vector, got {}x{}", x.rows, x.cols)));
        }
        let probs = softmax_values(&x.data, mask)?;
        let g = self.needs(a);
        Ok(self.push(Matrix::row_vector(probs), Op::Softmax(a), g))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NnError> {
        let x = self.value(a);
        if x.rows != 1 || x.cols == 0 {
            return Err(NnError::Shape(format!("log_softmax expects a row vector, got {}x{}", x.rows, x.cols)));
        }
        let max = x.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let value = Matrix::row_vector(x.data.iter().map(|v| v - lse).collect());
        let g = self.needs(a);
        Ok(self.push(value, Op::LogSoftmax(a), g))
    }

    /// Element `index` (row-major) as a `1 x 1` node.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, NnError> {
        let x = self.value(a);
        let v = *x.data.get(index).ok_or_else(|| NnError::Shape(format!("pick {index} of {}", x.len())))?;
        let g = self.needs(a);
        Ok(self.push(Matrix::scalar(v), Op::Pick(a, index), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let g = self.needs(a);
        self.push(Matrix::scalar(s), Op::Sum(a), g)
    }

    /// Sum of same-shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = self.value(parts[0]).clone();
        let mut value = first;
        for p in &parts[1..] {
            let m = self.value(*p);
            if m.shape() != value.shape() {
                return Err(shape_err("add_n", &value, m));
            }
            for (v, x) in value.data.iter_mut().zip(&m.data) {
                *v += x;
            }
        }
        let g = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(value, Op::AddN(parts.to_vec()), g))
    }

    /// Reverse sweep from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0; self.nodes[loss.0].value.len()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gm = Matrix { rows: out.rows, cols: out.cols, data: g.to_vec() };
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_nt_into(&gm, bv, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_tn_into(av, &gm, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(out.cols.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(&out.data) {
                        if *y > 0.0 {
                            *x += gy;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(&out.data) {
                        *x += gy * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(&out.data) {
                        *x += gy * y * (1.0 - y);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols;
                    if let Some(gp) = self.acc(grads, *p) {
                        for r in 0..out.rows {
                            let src = &g[r * out.cols + off..r * out.cols + off + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    off += w;
                }
            }
            Op::Slice(a, start) => {
                let in_cols = self.nodes[a.0].value.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..out.rows {
                        let dst = &mut ga[r * in_cols + start..r * in_cols + start + out.cols];
                        dst.iter_mut().zip(&g[r * out.cols..(r + 1) * out.cols]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MaskRows(a, mask) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, keep) in mask.iter().enumerate() {
                        if *keep {
                            let range = r * out.cols..(r + 1) * out.cols;
                            ga[range.clone()].iter_mut().zip(&g[range]).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let p = &out.data;
                    let dot: f64 = g.iter().zip(p).map(|(x, y)| x * y).sum();
                    for ((x, gy), pi) in ga.iter_mut().zip(g).zip(p) {
                        *x += pi * (gy - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let total: f64 = g.iter().sum();
                    for ((x, gy), ly) in ga.iter_mut().zip(g).zip(&out.data) {
                        *x += gy - ly.exp() * total;
                    }
                }
            }
            Op::Pick(a, index) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga[*index] += g[0];
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::AddN(parts) => {
                for p in parts {
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }

    /// Collects gradients of bound parameters into a [`Gradients`] aligned with `params`.
    pub fn param_gradients(&self, grads: &Grads, params: &ParameterSet) -> Gradients {
        let mut out = Gradients::zeros_like(params);
        for (v, index) in &self.params {
            if let Some(g) = grads.wrt(*v) {
                out.tensors[*index].iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        out
    }
}

/// Numerically stable (masked) softmax of a plain slice.
pub fn softmax_values(x: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>, NnError> {
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(NnError::Shape(format!("softmax mask of length {} for {} entries", m.len(), x.len())));
        }
    }
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let max = (0..x.len()).filter(|&i| keep(i)).map(|i| x[i]).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NnError::EmptyMask);
    }
    let mut out: Vec<f64> = (0..x.len()).map(|i| if keep(i) { (x[i] - max).exp() } else { 0.0 }).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}
