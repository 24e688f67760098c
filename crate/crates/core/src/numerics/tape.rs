//! Reverse-mode differentiation over an explicit tape of primitive ops.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes in reverse and accumulates gradients into the inputs of each node.
//! Parameters enter the tape as leaves keyed by `(store uid, ParamId)`, so a
//! parameter used twice in one forward pass shares a single leaf.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_into, ParamId, ParamStore, Tensor2};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Exp,
    Ln,
    Powf(f64),
    Square,
    Sqrt,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinOp, Var, Var),
    Affine(Var, f64),
    Unary(Var, Unary),
    Softmax { x: Var, tau: f64, mask: Option<Vec<bool>> },
    LogSoftmax { x: Var, tau: f64, mask: Option<Vec<bool>> },
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    RowNorms(Var),
    L2NormalizeRows(Var, Vec<f64>),
    Clamp(Var, f64, f64),
    MulConst(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

/// Records the branch taken at every non-differentiable point (ReLU, clamp,
/// hinge, zero norm) so gradient checks can detect when a perturbation
/// crosses a kink.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KinkTrace {
    pub signature: u64,
    pub min_distance: f64,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, ParamId), Var>,
    track_kinks: bool,
    kinks: KinkTrace,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn kink_mix(h: u64, v: u64) -> u64 {
    let mut z = h ^ v.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 27)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_kinks: false,
            kinks: KinkTrace {
                signature: 0,
                min_distance: f64::INFINITY,
            },
        }
    }

    pub fn with_kink_tracking() -> Self {
        let mut t = Self::new();
        t.track_kinks = true;
        t
    }

    pub fn kinks(&self) -> KinkTrace {
        self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Evaluation(format!("non-finite output from `{name}`")));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn note_kink(&mut self, branch: u64, distance: f64) {
        let idx = self.nodes.len() as u64;
        self.kinks.signature = kink_mix(self.kinks.signature, (idx << 2) ^ branch);
        if distance < self.kinks.min_distance {
            self.kinks.min_distance = distance;
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.grad()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data()[0]
    }

    /// Constant input: never receives gradient.
    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push_leaf(t, false)
    }

    /// Differentiable input that is not a parameter.
    pub fn leaf(&mut self, t: Tensor2) -> Var {
        self.push_leaf(t, true)
    }

    // Leaves are inputs; non-finite values are caught by the first op that
    // consumes them.
    fn push_leaf(&mut self, value: Tensor2, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let mut value = store.get(id).value.clone();
        value.zero_grad();
        let v = self.push_leaf(value, true);
        self.params.insert(key, v);
        v
    }

    /// Detached copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut t = self.value(v).clone();
        t.zero_grad();
        self.constant(t)
    }

    /// Adds the gradients of every leaf taken from `store` into the store's
    /// parameter grad buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&(uid, id), &v) in &self.params {
            if uid != store.uid() {
                continue;
            }
            let g = self.nodes[v.0].value.grad();
            for (dst, src) in store.get_mut(id).value.grad_mut().iter_mut().zip(g) {
                *dst += src;
            }
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor2::from_vec(m, n, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg, "transpose")
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let dim = |x: usize, y: usize| {
            if x == y || y == 1 {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else {
                None
            }
        };
        match (dim(ra, rb), dim(ca, cb)) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(Error::dim(op, (ra, ca), (rb, cb))),
        }
    }

    fn binary(&mut self, kind: BinOp, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (rows, cols) = self.broadcast_shape(name, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let (ra, ca) = ta.shape();
        let (rb, cb) = tb.shape();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let ar = if ra == 1 { 0 } else { r };
            let br = if rb == 1 { 0 } else { r };
            for c in 0..cols {
                let x = ta.data()[ar * ca + if ca == 1 { 0 } else { c }];
                let y = tb.data()[br * cb + if cb == 1 { 0 } else { c }];
                out.push(match kind {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor2::from_vec(rows, cols, out)?, Op::Binary(kind, a, b), rg, name)
    }

    /// Elementwise `a + b` with 2-D broadcasting of unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b, "div")
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.zero_grad();
        for v in t.data_mut() {
            *v = scale * *v + offset;
        }
        let rg = self.rg(x);
        self.push(t, Op::Affine(x, scale), rg, "affine")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let src = self.value(x).clone();
        let (rows, cols) = src.shape();
        let mut out = Vec::with_capacity(src.len());
        for &v in src.data() {
            let y = match kind {
                Unary::Sigmoid => {
                    if v >= 0.0 {
                        1.0 / (1.0 + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (1.0 + e)
                    }
                }
                Unary::Tanh => v.tanh(),
                Unary::Relu => v.max(0.0),
                Unary::LeakyRelu(s) => {
                    if v > 0.0 {
                        v
                    } else {
                        s * v
                    }
                }
                Unary::Exp => v.exp(),
                Unary::Ln => {
                    if v <= 0.0 {
                        return Err(Error::Evaluation(format!("ln of non-positive value {v}")));
                    }
                    v.ln()
                }
                Unary::Powf(p) => {
                    if v < 0.0 && p.fract() != 0.0 {
                        return Err(Error::Evaluation(format!("fractional power of negative value {v}")));
                    }
                    v.powf(p)
                }
                Unary::Square => v * v,
                Unary::Sqrt => {
                    if v < 0.0 {
                        return Err(Error::Evaluation(format!("sqrt of negative value {v}")));
                    }
                    v.sqrt()
                }
            };
            out.push(y);
        }
        if self.track_kinks && matches!(kind, Unary::Relu | Unary::LeakyRelu(_)) {
            for &v in src.data() {
                self.note_kink(u64::from(v > 0.0), v.abs());
            }
        }
        let rg = self.rg(x);
        self.push(Tensor2::from_vec(rows, cols, out)?, Op::Unary(x, kind), rg, "unary")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Ln)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(x, Unary::Powf(p))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    fn softmax_impl(&mut self, x: Var, tau: f64, mask: Option<Vec<bool>>, log: bool) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("softmax temperature must be positive, got {tau}")));
        }
        let src = self.value(x);
        let (rows, cols) = src.shape();
        if let Some(m) = &mask {
            if m.len() != rows * cols {
                return Err(Error::dim("softmax mask", (rows, cols), (m.len(), 1)));
            }
        }
        let on = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let base = r * cols;
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if on(base + c) {
                    max = max.max(src.data()[base + c] / tau);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Input(format!("softmax row {r} has no unmasked entries")));
            }
            let mut sum = 0.0;
            for c in 0..cols {
                if on(base + c) {
                    let e = (src.data()[base + c] / tau - max).exp();
                    out[base + c] = e;
                    sum += e;
                }
            }
            if log {
                let lse = max + sum.ln();
                for c in 0..cols {
                    if on(base + c) {
                        out[base + c] = src.data()[base + c] / tau - lse;
                    }
                }
            } else {
                for c in 0..cols {
                    out[base + c] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor2::from_vec(rows, cols, out)?;
        if log {
            self.push(t, Op::LogSoftmax { x, tau, mask }, rg, "log_softmax")
        } else {
            self.push(t, Op::Softmax { x, tau, mask }, rg, "softmax")
        }
    }

    /// Row-wise softmax of `x / tau`, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        self.softmax_impl(x, tau, None, false)
    }

    /// Softmax restricted to entries where `mask` is true; others are 0.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        self.softmax_impl(x, 1.0, Some(mask), false)
    }

    pub fn log_softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        self.softmax_impl(x, tau, None, true)
    }

    /// Masked log-softmax; masked-out entries hold 0 and carry no gradient.
    pub fn masked_log_softmax_rows(&mut self, x: Var, tau: f64, mask: Vec<bool>) -> Result<Var> {
        self.softmax_impl(x, tau, Some(mask), true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor2::scalar(s), Op::SumAll(x), rg, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Input("mean of empty tensor".into()));
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums as an `n×1` column.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        let out = (0..rows).map(|r| t.data()[r * cols..(r + 1) * cols].iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor2::from_vec(rows, 1, out)?, Op::RowSums(x), rg, "row_sums")
    }

    /// Per-column sums as a `1×c` row.
    pub fn col_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor2::from_vec(1, cols, out)?, Op::ColSums(x), rg, "col_sums")
    }

    /// Arithmetic mean over rows: `n×c -> 1×c`.
    pub fn mean_pool_rows(&mut self, x: Var) -> Result<Var> {
        let rows = self.shape(x).0;
        if rows == 0 {
            return Err(Error::Input("mean pool over zero rows".into()));
        }
        let s = self.col_sums(x)?;
        self.scale(s, 1.0 / rows as f64)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::dim("concat_cols", (rows, cols), s));
            }
            cols += s.1;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor2::from_vec(rows, cols, out)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(Error::dim("concat_rows", (rows, cols), s));
            }
            rows += s.0;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor2::from_vec(rows, cols, out)?, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return Err(Error::dim("slice_cols", (rows, cols), (start, len)));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor2::from_vec(rows, len, out)?, Op::SliceCols(x, start), rg, "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > rows {
            return Err(Error::dim("slice_rows", (rows, cols), (start, len)));
        }
        let out = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(x);
        self.push(Tensor2::from_vec(len, cols, out)?, Op::SliceRows(x, start), rg, "slice_rows")
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let t = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::dim("gather_rows", (rows, cols), (i, 0)));
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(x);
        self.push(
            Tensor2::from_vec(idx.len(), cols, out)?,
            Op::GatherRows(x, idx.to_vec()),
            rg,
            "gather_rows",
        )
    }

    /// Selects single entries `(row, col)` into a `k×1` column.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let t = self.value(x);
        let mut out = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= rows || c >= cols {
                return Err(Error::dim("pick", (rows, cols), (r, c)));
            }
            out.push(t.get(r, c));
        }
        let rg = self.rg(x);
        self.push(Tensor2::from_vec(at.len(), 1, out)?, Op::Pick(x, at.to_vec()), rg, "pick")
    }

    /// Euclidean norm of each row (`n×1`). The subgradient at a zero row is 0.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, _) = t.shape();
        let out: Vec<f64> = (0..rows).map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        if self.track_kinks {
            for &n in &out {
                self.note_kink(u64::from(n > 0.0), n);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor2::from_vec(rows, 1, out)?, Op::RowNorms(x), rg, "row_norms")
    }

    /// Scales each row to unit L2 norm; rows with norm ≤ 1e-12 are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = t.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= 1e-12 {
                return Err(Error::Normalization(format!("row {r} has norm {n:e}")));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let rg = self.rg(x);
        self.push(
            Tensor2::from_vec(rows, cols, out)?,
            Op::L2NormalizeRows(x, norms),
            rg,
            "l2_normalize_rows",
        )
    }

    /// Clamp to `[lo, hi]`. Gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::Parameter(format!("clamp bounds must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        let src = self.value(x).clone();
        let out: Vec<f64> = src.data().iter().map(|v| v.clamp(lo, hi)).collect();
        if self.track_kinks {
            for &v in src.data() {
                let inside = v > lo && v < hi;
                self.note_kink(u64::from(inside), (v - lo).abs().min((v - hi).abs()));
            }
        }
        let rg = self.rg(x);
        let (r, c) = src.shape();
        self.push(Tensor2::from_vec(r, c, out)?, Op::Clamp(x, lo, hi), rg, "clamp")
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, x: Var, k: Vec<f64>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if k.len() != r * c {
            return Err(Error::dim("mul_const", (r, c), (k.len(), 1)));
        }
        let out = self.value(x).data().iter().zip(&k).map(|(a, b)| a * b).collect();
        let rg = self.rg(x);
        self.push(Tensor2::from_vec(r, c, out)?, Op::MulConst(x, k), rg, "mul_const")
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a 1×1 node. Gradients accumulate; call on a fresh tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::dim("backward", self.shape(loss), (1, 1)));
        }
        self.nodes[loss.0].value.grad_mut()[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[i].value.take_grad();
            if g.iter().all(|&v| v == 0.0) {
                self.nodes[i].value.put_grad(g);
                continue;
            }
            let (before, after) = self.nodes.split_at_mut(i);
            let node = &after[0];
            backprop(before, node, &g);
            self.nodes[i].value.put_grad(g);
        }
        Ok(())
    }
}

fn backprop(nodes: &mut [Node], node: &Node, g: &[f64]) {
    let out = &node.value;
    let (orows, ocols) = out.shape();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.shape();
            let n = nodes[b.0].value.shape().1;
            if nodes[a.0].requires_grad {
                let bv = nodes[b.0].value.data().to_vec();
                let ga = nodes[a.0].value.grad_mut();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if nodes[b.0].requires_grad {
                let av = nodes[a.0].value.data().to_vec();
                let gb = nodes[b.0].value.grad_mut();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = av[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for (dst, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *dst += a_ip * gv;
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let ga = nodes[a.0].value.grad_mut();
            // out is (c×r) for input (r×c)
            let r = ocols;
            let c = orows;
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] += g[j * r + i];
                }
            }
        }
        Op::Binary(kind, a, b) => {
            let (ra, ca) = nodes[a.0].value.shape();
            let (rb, cb) = nodes[b.0].value.shape();
            let av = nodes[a.0].value.data().to_vec();
            let bv = nodes[b.0].value.data().to_vec();
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for r in 0..orows {
                let ar = if ra == 1 { 0 } else { r };
                let br = if rb == 1 { 0 } else { r };
                for c in 0..ocols {
                    let ia = ar * ca + if ca == 1 { 0 } else { c };
                    let ib = br * cb + if cb == 1 { 0 } else { c };
                    let gv = g[r * ocols + c];
                    let (da, db) = match kind {
                        BinOp::Add => (1.0, 1.0),
                        BinOp::Sub => (1.0, -1.0),
                        BinOp::Mul => (bv[ib], av[ia]),
                        BinOp::Div => (1.0 / bv[ib], -av[ia] / (bv[ib] * bv[ib])),
                    };
                    ga[ia] += gv * da;
                    gb[ib] += gv * db;
                }
            }
            if a == b {
                if nodes[a.0].requires_grad {
                    for (dst, (x, y)) in nodes[a.0].value.grad_mut().iter_mut().zip(ga.iter().zip(&gb)) {
                        *dst += x + y;
                    }
                }
                return;
            }
            if nodes[a.0].requires_grad {
                add_into(nodes[a.0].value.grad_mut(), &ga);
            }
            if nodes[b.0].requires_grad {
                add_into(nodes[b.0].value.grad_mut(), &gb);
            }
        }
        Op::Affine(x, s) => {
            for (dst, gv) in nodes[x.0].value.grad_mut().iter_mut().zip(g) {
                *dst += s * gv;
            }
        }
        Op::Unary(x, kind) => {
            let xv = nodes[x.0].value.data().to_vec();
            let yv = out.data();
            let gx = nodes[x.0].value.grad_mut();
            for i in 0..xv.len() {
                let d = match kind {
                    Unary::Sigmoid => yv[i] * (1.0 - yv[i]),
                    Unary::Tanh => 1.0 - yv[i] * yv[i],
                    Unary::Relu => {
                        if xv[i] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Unary::LeakyRelu(s) => {
                        if xv[i] > 0.0 {
                            1.0
                        } else {
                            *s
                        }
                    }
                    Unary::Exp => yv[i],
                    Unary::Ln => 1.0 / xv[i],
                    Unary::Powf(p) => {
                        if xv[i] == 0.0 {
                            if *p > 1.0 {
                                0.0
                            } else if *p == 1.0 {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            p * xv[i].powf(p - 1.0)
                        }
                    }
                    Unary::Square => 2.0 * xv[i],
                    Unary::Sqrt => {
                        if yv[i] > 0.0 {
                            0.5 / yv[i]
                        } else {
                            0.0
                        }
                    }
                };
                gx[i] += g[i] * d;
            }
        }
        Op::Softmax { x, tau, mask } => {
            let y = out.data();
            let gx = nodes[x.0].value.grad_mut();
            for r in 0..orows {
                let base = r * ocols;
                let dot: f64 = (0..ocols).map(|c| g[base + c] * y[base + c]).sum();
                for c in 0..ocols {
                    let i = base + c;
                    if mask.as_ref().map_or(true, |m| m[i]) {
                        gx[i] += y[i] * (g[i] - dot) / tau;
                    }
                }
            }
        }
        Op::LogSoftmax { x, tau, mask } => {
            let y = out.data();
            let gx = nodes[x.0].value.grad_mut();
            for r in 0..orows {
                let base = r * ocols;
                let on = |c: usize| mask.as_ref().map_or(true, |m| m[base + c]);
                let gsum: f64 = (0..ocols).filter(|&c| on(c)).map(|c| g[base + c]).sum();
                for c in 0..ocols {
                    if on(c) {
                        let i = base + c;
                        gx[i] += (g[i] - y[i].exp() * gsum) / tau;
                    }
                }
            }
        }
        Op::SumAll(x) => {
            for dst in nodes[x.0].value.grad_mut() {
                *dst += g[0];
            }
        }
        Op::RowSums(x) => {
            let cols = nodes[x.0].value.cols();
            let gx = nodes[x.0].value.grad_mut();
            for r in 0..orows {
                for dst in &mut gx[r * cols..(r + 1) * cols] {
                    *dst += g[r];
                }
            }
        }
        Op::ColSums(x) => {
            let rows = nodes[x.0].value.rows();
            let gx = nodes[x.0].value.grad_mut();
            for r in 0..rows {
                for (dst, gv) in gx[r * ocols..(r + 1) * ocols].iter_mut().zip(g) {
                    *dst += gv;
                }
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for p in parts {
                let pc = nodes[p.0].value.cols();
                if nodes[p.0].requires_grad {
                    let gp = nodes[p.0].value.grad_mut();
                    for r in 0..orows {
                        for c in 0..pc {
                            gp[r * pc + c] += g[r * ocols + offset + c];
                        }
                    }
                }
                offset += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                if nodes[p.0].requires_grad {
                    add_into(nodes[p.0].value.grad_mut(), &g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::SliceCols(x, start) => {
            let cols = nodes[x.0].value.cols();
            let gx = nodes[x.0].value.grad_mut();
            for r in 0..orows {
                for c in 0..ocols {
                    gx[r * cols + start + c] += g[r * ocols + c];
                }
            }
        }
        Op::SliceRows(x, start) => {
            let gx = nodes[x.0].value.grad_mut();
            add_into(&mut gx[start * ocols..(start + orows) * ocols], g);
        }
        Op::GatherRows(x, idx) => {
            let gx = nodes[x.0].value.grad_mut();
            for (k, &i) in idx.iter().enumerate() {
                add_into(&mut gx[i * ocols..(i + 1) * ocols], &g[k * ocols..(k + 1) * ocols]);
            }
        }
        Op::Pick(x, at) => {
            let cols = nodes[x.0].value.cols();
            let gx = nodes[x.0].value.grad_mut();
            for (k, &(r, c)) in at.iter().enumerate() {
                gx[r * cols + c] += g[k];
            }
        }
        Op::RowNorms(x) => {
            let cols = nodes[x.0].value.cols();
            let xv = nodes[x.0].value.data().to_vec();
            let gx = nodes[x.0].value.grad_mut();
            for r in 0..orows {
                let n = out.data()[r];
                if n == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    gx[r * cols + c] += g[r] * xv[r * cols + c] / n;
                }
            }
        }
        Op::L2NormalizeRows(x, norms) => {
            let y = out.data();
            let gx = nodes[x.0].value.grad_mut();
            for r in 0..orows {
                let base = r * ocols;
                let dot: f64 = (0..ocols).map(|c| g[base + c] * y[base + c]).sum();
                for c in 0..ocols {
                    gx[base + c] += (g[base + c] - y[base + c] * dot) / norms[r];
                }
            }
        }
        Op::Clamp(x, lo, hi) => {
            let xv = nodes[x.0].value.data().to_vec();
            let gx = nodes[x.0].value.grad_mut();
            for i in 0..xv.len() {
                if xv[i] > *lo && xv[i] < *hi {
                    gx[i] += g[i];
                }
            }
        }
        Op::MulConst(x, k) => {
            for ((dst, gv), kv) in nodes[x.0].value.grad_mut().iter_mut().zip(g).zip(k) {
                *dst += gv * kv;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i3 = tape.constant(Tensor2::identity(3));
        let x = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let y = tape.matmul(i3, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t(&[&[1.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor2::zeros(2, 3));
        let b = tape.constant(Tensor2::zeros(2, 2));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(2, 2)"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.0, 0.0, 0.0]]));
        let y = tape.softmax_rows(x, 1.0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[&[2f64.ln(), 0.0]]));
        let y = tape.softmax_rows(x, 1.0).unwrap();
        assert!((tape.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        let x = tape.constant(t(&[&[10.0, 0.0]]));
        let y = tape.softmax_rows(x, 1000.0).unwrap();
        assert!((tape.value(y).data()[0] - 0.5025).abs() < 1e-3);
        assert!((tape.value(y).data()[1] - 0.4975).abs() < 1e-3);
        assert!(matches!(tape.softmax_rows(x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(tape.softmax_rows(x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor2::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.scalar(s), 0.5);
        let v = tape.constant(t(&[&[3.0, 4.0]]));
        let n = tape.l2_normalize_rows(v).unwrap();
        assert!((tape.value(n).data()[0] - 0.6).abs() < 1e-15);
        assert!((tape.value(n).data()[1] - 0.8).abs() < 1e-15);
        let q = tape.constant(Tensor2::scalar(0.03));
        let c = tape.clamp(q, 0.1, 1.0).unwrap();
        assert_eq!(tape.scalar(c), 0.1);
        let zero = tape.constant(Tensor2::zeros(1, 3));
        assert!(matches!(tape.l2_normalize_rows(zero), Err(Error::Normalization(_))));
        let frames = tape.constant(t(&[&[1.0, 1.0], &[3.0, 3.0]]));
        let m = tape.mean_pool_rows(frames).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 2.0]);
    }

    #[test]
    fn clamp_gradient_is_zero_on_boundary() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[0.1, 0.5, 1.0, 2.0, -1.0]]));
        let c = tape.clamp(x, 0.1, 1.0).unwrap();
        let s = tape.sum_all(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcast_add_column_and_row() {
        let mut tape = Tape::new();
        let col = tape.leaf(t(&[&[1.0], &[2.0]]));
        let row = tape.leaf(t(&[&[10.0, 20.0, 30.0]]));
        let m = tape.add(col, row).unwrap();
        assert_eq!(tape.shape(m), (2, 3));
        assert_eq!(tape.value(m).data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let s = tape.sum_all(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(col), &[3.0, 3.0]);
        assert_eq!(tape.grad(row), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn self_product_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), &[6.0]);
    }

    #[test]
    fn row_norm_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::zeros(1, 2));
        let n = tape.row_norms(x).unwrap();
        let s = tape.sum_all(n).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 5.0, 2.0]]));
        let y = tape.masked_softmax_rows(x, vec![true, false, true]).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_is_an_evaluation_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(Error::Evaluation(_))));
    }
}
