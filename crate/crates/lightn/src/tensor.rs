//! Dense-matrix numerics with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation during the forward pass; [`Tape::backward`]
//! replays the records in reverse and accumulates gradients into the leaves that
//! asked for them. Everything is `f64`, row-major, single-threaded.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Matrix::new(rows, cols, vec![1.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols);
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Matrix::new(1, v.len(), v.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Plain (untaped) matrix product; `i-k-j` loop order for cache locality.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for j in 0..m {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        Ok(Matrix::new(n, m, out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Unary pointwise kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Exp,
    Square,
    Log,
}

/// Binary pointwise kinds (matching shapes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Reduction kinds.
///
/// `MaxOverRows`/`MinOverRows` reduce each column over the rows (output `1xC`);
/// `MinOverCols`/`SumOverCols` reduce each row over the columns (output `Rx1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    MaxOverRows,
    MinOverRows,
    MinOverCols,
    SumOverCols,
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Transpose(VarId),
    Binary(Binary, VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    Unary(Unary, VarId),
    /// x / t where t is a 1x1 node.
    DivScalarVar(VarId, VarId),
    /// x + b with b a 1xC row broadcast over the rows of x.
    AddRow(VarId, VarId),
    RowSoftmax(VarId),
    Reduce(Reduce, VarId, Vec<usize>),
    Reshape(VarId),
    Row(VarId, usize),
    ConcatRows(Vec<VarId>),
    Gather(VarId, Vec<(usize, usize)>),
    /// Per-row normalization with learnable gain/shift (both 1xC).
    /// Saved per-row (mean, inv_std).
    LayerNormRows {
        x: VarId,
        gain: VarId,
        shift: VarId,
        stats: Vec<(f64, f64)>,
    },
}

struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Wengert tape. Records forward operations for reverse-mode differentiation
/// and counts multiply-accumulates for the cost-model oracle.
pub struct Tape {
    nodes: Vec<Node>,
    /// Multiply-accumulate count over all matrix products recorded so far.
    pub mac_count: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), mac_count: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, id: VarId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> VarId {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node { op, value, requires_grad });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input: participates in the forward pass, receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    /// Differentiable leaf: gradient is accumulated for it during backward.
    pub fn leaf(&mut self, value: Matrix) -> VarId {
        self.push(Op::Leaf, value, true)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        if va.cols() != vb.rows() {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        }
        self.mac_count += (va.rows() * va.cols() * vb.cols()) as u64;
        let value = va.matmul(vb)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a.0].value.transpose();
        let rg = self.needs(a);
        self.push(Op::Transpose(a), value, rg)
    }

    pub fn binary(&mut self, kind: Binary, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim("elementwise", sa, sb));
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let value = Matrix::new(sa.0, sa.1, data);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Binary(kind, a, b), value, rg))
    }

    pub fn unary(&mut self, kind: Unary, a: VarId) -> VarId {
        let value = self.nodes[a.0].value.map(|v| match kind {
            Unary::Relu => v.max(0.0),
            Unary::Exp => v.exp(),
            Unary::Square => v * v,
            Unary::Log => v.ln(),
        });
        let rg = self.needs(a);
        self.push(Op::Unary(kind, a), value, rg)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.nodes[a.0].value.map(|v| v * c);
        let rg = self.needs(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.nodes[a.0].value.map(|v| v + c);
        let rg = self.needs(a);
        self.push(Op::AddScalar(a), value, rg)
    }

    /// Divide every entry of `a` by the 1x1 node `t`.
    pub fn div_scalar_var(&mut self, a: VarId, t: VarId) -> Result<VarId> {
        if self.shape(t) != (1, 1) {
            return Err(Error::Contract("divisor must be a 1x1 node".into()));
        }
        let tv = self.nodes[t.0].value.get(0, 0);
        if tv == 0.0 {
            return Err(Error::Domain("division by zero temperature".into()));
        }
        let value = self.nodes[a.0].value.map(|v| v / tv);
        let rg = self.needs(a) || self.needs(t);
        Ok(self.push(Op::DivScalarVar(a, t), value, rg))
    }

    /// Row-bias broadcast: `x + b` where `b` is `1 x x.cols`.
    pub fn add_row(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.0 != 1 || sb.1 != sx.1 {
            return Err(Error::dim("add_row", sx, sb));
        }
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[b.0].value;
        let mut out = vx.clone();
        for r in 0..sx.0 {
            for c in 0..sx.1 {
                let v = out.get(r, c) + vb.get(0, c);
                out.set(r, c, v);
            }
        }
        let rg = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddRow(x, b), out, rg))
    }

    /// `x*w + b`, the shared linear layer.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Numerically stable per-row softmax (max subtracted per row).
    pub fn row_softmax(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.shape();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = va.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                out.set(r, c, e);
                sum += e;
            }
            for c in 0..cols {
                let v = out.get(r, c) / sum;
                out.set(r, c, v);
            }
        }
        let rg = self.needs(a);
        self.push(Op::RowSoftmax(a), out, rg)
    }

    pub fn reduce(&mut self, kind: Reduce, a: VarId) -> VarId {
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.shape();
        let mut routing = Vec::new();
        let value = match kind {
            Reduce::Sum => Matrix::new(1, 1, vec![va.data().iter().sum()]),
            Reduce::Mean => {
                let s: f64 = va.data().iter().sum();
                Matrix::new(1, 1, vec![s / (rows * cols) as f64])
            }
            Reduce::MaxOverRows | Reduce::MinOverRows => {
                let mut out = vec![0.0; cols];
                routing = vec![0; cols];
                for c in 0..cols {
                    let mut best = va.get(0, c);
                    let mut best_r = 0;
                    for r in 1..rows {
                        let v = va.get(r, c);
                        // Ties keep the lowest index (strict comparison).
                        let better = if matches!(kind, Reduce::MaxOverRows) { v > best } else { v < best };
                        if better {
                            best = v;
                            best_r = r;
                        }
                    }
                    out[c] = best;
                    routing[c] = best_r;
                }
                Matrix::new(1, cols, out)
            }
            Reduce::MinOverCols => {
                let mut out = vec![0.0; rows];
                routing = vec![0; rows];
                for r in 0..rows {
                    let mut best = va.get(r, 0);
                    let mut best_c = 0;
                    for c in 1..cols {
                        let v = va.get(r, c);
                        if v < best {
                            best = v;
                            best_c = c;
                        }
                    }
                    out[r] = best;
                    routing[r] = best_c;
                }
                Matrix::new(rows, 1, out)
            }
            Reduce::SumOverCols => {
                let mut out = vec![0.0; rows];
                for r in 0..rows {
                    out[r] = va.row_slice(r).iter().sum();
                }
                Matrix::new(rows, 1, out)
            }
        };
        let rg = self.needs(a);
        self.push(Op::Reduce(kind, a, routing), value, rg)
    }

    pub fn reshape(&mut self, a: VarId, rows: usize, cols: usize) -> Result<VarId> {
        let va = &self.nodes[a.0].value;
        if va.rows() * va.cols() != rows * cols {
            return Err(Error::dim("reshape", va.shape(), (rows, cols)));
        }
        let value = Matrix::new(rows, cols, va.data().to_vec());
        let rg = self.needs(a);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Extract row `i` as a 1xC node.
    pub fn row(&mut self, a: VarId, i: usize) -> VarId {
        let va = &self.nodes[a.0].value;
        let value = Matrix::row_vector(va.row_slice(i));
        let rg = self.needs(a);
        self.push(Op::Row(a, i), value, rg)
    }

    /// Stack 1-or-more nodes of equal column count by rows.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != cols {
                return Err(Error::dim("concat_rows", (rows, cols), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Matrix::new(rows, cols, data);
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, rg))
    }

    /// Pick entries at fixed positions into a 1xK node.
    pub fn gather(&mut self, a: VarId, positions: Vec<(usize, usize)>) -> VarId {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = positions.iter().map(|&(r, c)| va.get(r, c)).collect();
        let value = Matrix::row_vector(&data);
        let rg = self.needs(a);
        self.push(Op::Gather(a, positions), value, rg)
    }

    /// Per-row layer normalization with learnable `gain`/`shift` (both 1xC).
    pub fn layer_norm_rows(&mut self, x: VarId, gain: VarId, shift: VarId) -> Result<VarId> {
        let (rows, cols) = self.shape(x);
        if self.shape(gain) != (1, cols) || self.shape(shift) != (1, cols) {
            return Err(Error::dim("layer_norm", (rows, cols), self.shape(gain)));
        }
        let vx = &self.nodes[x.0].value;
        let vg = &self.nodes[gain.0].value;
        let vs = &self.nodes[shift.0].value;
        let mut out = Matrix::zeros(rows, cols);
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..cols {
                let xh = (row[c] - mean) * inv_std;
                out.set(r, c, vg.get(0, c) * xh + vs.get(0, c));
            }
            stats.push((mean, inv_std));
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(shift);
        Ok(self.push(Op::LayerNormRows { x, gain, shift, stats }, out, rg))
    }

    /// Reverse pass from a scalar (1x1) node. Returns per-node gradients;
    /// only nodes on a differentiable path get a buffer.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss node, got {}x{}",
                self.shape(loss).0,
                self.shape(loss).1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::new(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut Vec<Option<Matrix>>, id: VarId, delta: Matrix) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut Vec<Option<Matrix>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let bt = self.nodes[b.0].value.transpose();
                    let da = g.matmul(&bt).expect("backward shape");
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let at = self.nodes[a.0].value.transpose();
                    let db = at.matmul(g).expect("backward shape");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose());
            }
            Op::Binary(kind, a, b) => {
                match kind {
                    Binary::Add => {
                        self.accumulate(grads, *a, g.clone());
                        self.accumulate(grads, *b, g.clone());
                    }
                    Binary::Sub => {
                        self.accumulate(grads, *a, g.clone());
                        self.accumulate(grads, *b, g.map(|v| -v));
                    }
                    Binary::Mul => {
                        if self.needs(*a) {
                            let vb = &self.nodes[b.0].value;
                            let da = Matrix::new(
                                g.rows(),
                                g.cols(),
                                g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
                            );
                            self.accumulate(grads, *a, da);
                        }
                        if self.needs(*b) {
                            let va = &self.nodes[a.0].value;
                            let db = Matrix::new(
                                g.rows(),
                                g.cols(),
                                g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect(),
                            );
                            self.accumulate(grads, *b, db);
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::Unary(kind, a) => {
                let va = &self.nodes[a.0].value;
                let da = match kind {
                    Unary::Relu => Matrix::new(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(va.data())
                            .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                            .collect(),
                    ),
                    Unary::Exp => {
                        let y = &self.nodes[i].value;
                        Matrix::new(
                            g.rows(),
                            g.cols(),
                            g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect(),
                        )
                    }
                    Unary::Square => Matrix::new(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(va.data())
                            .map(|(&gv, &xv)| gv * 2.0 * xv)
                            .collect(),
                    ),
                    Unary::Log => Matrix::new(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(va.data()).map(|(&gv, &xv)| gv / xv).collect(),
                    ),
                };
                self.accumulate(grads, *a, da);
            }
            Op::DivScalarVar(a, t) => {
                let tv = self.nodes[t.0].value.get(0, 0);
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.map(|v| v / tv));
                }
                if self.needs(*t) {
                    let va = &self.nodes[a.0].value;
                    let dt: f64 = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &xv)| -gv * xv / (tv * tv))
                        .sum();
                    self.accumulate(grads, *t, Matrix::new(1, 1, vec![dt]));
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let v = db.get(0, c) + g.get(r, c);
                            db.set(0, c, v);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::RowSoftmax(a) => {
                let y = &self.nodes[i].value;
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let dot: f64 = (0..g.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                    for c in 0..g.cols() {
                        da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Reduce(kind, a, routing) => {
                let va = &self.nodes[a.0].value;
                let (rows, cols) = va.shape();
                let mut da = Matrix::zeros(rows, cols);
                match kind {
                    Reduce::Sum => {
                        let gv = g.get(0, 0);
                        da = Matrix::new(rows, cols, vec![gv; rows * cols]);
                    }
                    Reduce::Mean => {
                        let gv = g.get(0, 0) / (rows * cols) as f64;
                        da = Matrix::new(rows, cols, vec![gv; rows * cols]);
                    }
                    Reduce::MaxOverRows | Reduce::MinOverRows => {
                        for c in 0..cols {
                            da.set(routing[c], c, g.get(0, c));
                        }
                    }
                    Reduce::MinOverCols => {
                        for r in 0..rows {
                            da.set(r, routing[r], g.get(r, 0));
                        }
                    }
                    Reduce::SumOverCols => {
                        for r in 0..rows {
                            for c in 0..cols {
                                da.set(r, c, g.get(r, 0));
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::new(rows, cols, g.data().to_vec()));
            }
            Op::Row(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut da = Matrix::zeros(rows, cols);
                for c in 0..cols {
                    da.set(*idx, c, g.get(0, c));
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.needs(p) {
                        let mut dp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dp.set(r, c, g.get(offset + r, c));
                            }
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += rows;
                }
            }
            Op::Gather(a, positions) => {
                let (rows, cols) = self.shape(*a);
                let mut da = Matrix::zeros(rows, cols);
                for (k, &(r, c)) in positions.iter().enumerate() {
                    let v = da.get(r, c) + g.get(0, k);
                    da.set(r, c, v);
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNormRows { x, gain, shift, stats } => {
                let vx = &self.nodes[x.0].value;
                let vg = &self.nodes[gain.0].value;
                let (rows, cols) = vx.shape();
                let nc = cols as f64;
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgain = Matrix::zeros(1, cols);
                let mut dshift = Matrix::zeros(1, cols);
                for r in 0..rows {
                    let (mean, inv_std) = stats[r];
                    // xh = (x - mean) * inv_std; y = gain*xh + shift
                    let xh: Vec<f64> =
                        vx.row_slice(r).iter().map(|&v| (v - mean) * inv_std).collect();
                    let gy: Vec<f64> =
                        (0..cols).map(|c| g.get(r, c) * vg.get(0, c)).collect();
                    let sum_gy: f64 = gy.iter().sum();
                    let sum_gy_xh: f64 = gy.iter().zip(&xh).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        let v = (gy[c] - sum_gy / nc - xh[c] * sum_gy_xh / nc) * inv_std;
                        dx.set(r, c, v);
                        let dg = dgain.get(0, c) + g.get(r, c) * xh[c];
                        dgain.set(0, c, dg);
                        let ds = dshift.get(0, c) + g.get(r, c);
                        dshift.set(0, c, ds);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *shift, dshift);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient buffer for a node, if one was allocated.
    pub fn get(&self, id: VarId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf that was expected to receive one.
    pub fn expect(&self, id: VarId) -> &Matrix {
        self.get(id).expect("no gradient allocated for node")
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with the given step.
pub fn grad_check<F>(f: F, x: &Matrix, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let loss = f(&mut tape, xid)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.expect(xid).clone();

    let mut max_err: f64 = 0.0;
    for idx in 0..x.data().len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut xp = x.clone();
            xp.data_mut()[idx] += delta;
            let mut t = Tape::new();
            let id = t.leaf(xp);
            let l = f(&mut t, id)?;
            Ok(t.value(l).get(0, 0))
        };
        let fd = (eval(step)? - eval(-step)?) / (2.0 * step);
        let a = analytic.data()[idx];
        let err = (a - fd).abs() / fd.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
