//! Minimal reverse-mode automatic differentiation over [`Mat`].
//!
//! A [`Graph`] is an append-only tape. Nodes only reference earlier nodes, so
//! walking the tape backwards is a valid reverse topological order. Leaves
//! created with [`Graph::constant`] or [`Graph::detach`] stop gradient flow;
//! leaves created with [`Graph::param`] collect gradients.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which key tokens each query token may attend to; shared by every sample of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub queries: usize,
    pub keys: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut allowed = Vec::with_capacity(queries * keys);
        for i in 0..queries {
            let mut any = false;
            for j in 0..keys {
                let ok = f(i, j);
                any |= ok;
                allowed.push(ok);
            }
            if !any {
                return Err(Error::Contract(format!("query token {i} has no visible keys")));
            }
        }
        Ok(Self { queries, keys, allowed })
    }

    pub fn full(queries: usize, keys: usize) -> Self {
        Self { queries, keys, allowed: vec![true; queries * keys] }
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }
}

#[derive(Debug)]
struct AttnState {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    heads: usize,
    mask: Rc<AttnMask>,
    probs: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleGroups { x: Var, factors: Vec<f64>, group: usize },
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    RmsNorm { x: Var, inv: Vec<f64> },
    L2Rows { x: Var, inv: Vec<f64> },
    Attention(Box<AttnState>),
    CatTokens { a: Var, b: Var, batch: usize },
    SliceTokens { x: Var, batch: usize, tokens: usize, start: usize },
    CatCols(Var, Var),
    BroadcastRows(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    Mean(Var),
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]; `None` where no gradient reached the node.
#[derive(Debug)]
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros when the node was not reached.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant leaf holding the current value of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Multiplies each consecutive group of rows by its own factor; the group
    /// size is `rows / factors.len()`. Used for per-sample noise levels.
    pub fn scale_groups(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if factors.is_empty() || rows % factors.len() != 0 {
            return Err(Error::Shape(format!(
                "{} factors do not divide {rows} rows",
                factors.len()
            )));
        }
        let group = rows / factors.len();
        let mut value = self.value(x).clone();
        for (r, row) in value.data.chunks_mut(cols).enumerate() {
            let f = factors[r / group];
            row.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ScaleGroups { x, factors: factors.to_vec(), group }, rg))
    }

    fn row_broadcast_check(&self, a: Var, row: Var) -> Result<()> {
        let (_, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape(format!(
                "row operand {:?} does not broadcast over {:?}",
                self.shape(row),
                self.shape(a)
            )));
        }
        Ok(())
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast_check(a, row)?;
        let mut value = self.value(a).clone();
        let r = self.value(row).data.clone();
        for chunk in value.data.chunks_mut(r.len()) {
            chunk.iter_mut().zip(&r).for_each(|(x, b)| *x += b);
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast_check(a, row)?;
        let mut value = self.value(a).clone();
        let r = self.value(row).data.clone();
        for chunk in value.data.chunks_mut(r.len()) {
            chunk.iter_mut().zip(&r).for_each(|(x, g)| *x *= g);
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    /// Root-mean-square normalization of every row (no gain).
    pub fn rms_norm(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let cols = src.cols;
        let mut value = src.clone();
        let mut inv = Vec::with_capacity(src.rows);
        for row in value.data.chunks_mut(cols) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / cols as f64;
            let r = 1.0 / (ms + NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x *= r);
            inv.push(r);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::RmsNorm { x: a, inv }, rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let cols = src.cols;
        let mut value = src.clone();
        let mut inv = Vec::with_capacity(src.rows);
        for row in value.data.chunks_mut(cols) {
            let s = row.iter().map(|x| x * x).sum::<f64>();
            let r = 1.0 / (s + NORM_EPS * NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x *= r);
            inv.push(r);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::L2Rows { x: a, inv }, rg)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch * mask.queries, width]`, `k` and `v` are
    /// `[batch * mask.keys, width]`. Masked keys are skipped entirely, so
    /// their values cannot influence the output in any bit.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize, mask: Rc<AttnMask>) -> Result<Var> {
        let (qr, width) = self.shape(q);
        if qr != batch * mask.queries
            || self.shape(k) != (batch * mask.keys, width)
            || self.shape(v) != (batch * mask.keys, width)
            || heads == 0
            || width % heads != 0
        {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?} batch {batch} heads {heads} mask {}x{}",
                self.shape(q),
                self.shape(k),
                self.shape(v),
                mask.queries,
                mask.keys
            )));
        }
        let (tq, tk) = (mask.queries, mask.keys);
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let mut out = Mat::zeros(batch * tq, width);
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut scores = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let qrow = &qm.row(b * tq + i)[c0..c0 + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tk {
                        if mask.allows(i, j) {
                            let krow = &km.row(b * tk + j)[c0..c0 + dh];
                            let s = dot(qrow, krow) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let mut z = 0.0;
                    let pbase = ((b * heads + h) * tq + i) * tk;
                    for j in 0..tk {
                        if mask.allows(i, j) {
                            let e = (scores[j] - max).exp();
                            probs[pbase + j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out.data[(b * tq + i) * width + c0..(b * tq + i) * width + c0 + dh];
                    for j in 0..tk {
                        if mask.allows(i, j) {
                            let p = probs[pbase + j] / z;
                            probs[pbase + j] = p;
                            let vrow = &vm.row(b * tk + j)[c0..c0 + dh];
                            orow.iter_mut().zip(vrow).for_each(|(o, vv)| *o += p * vv);
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let state = AttnState { q, k, v, batch, heads, mask, probs };
        Ok(self.push(out, Op::Attention(Box::new(state)), rg))
    }

    /// Concatenates per-sample token runs: `[B*Ta, c] ++ [B*Tb, c] -> [B*(Ta+Tb), c]`.
    pub fn cat_tokens(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let value = self.value(a).cat_tokens(self.value(b), batch)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::CatTokens { a, b, batch }, rg))
    }

    pub fn slice_tokens(&mut self, x: Var, batch: usize, start: usize, len: usize) -> Result<Var> {
        let (rows, _) = self.shape(x);
        if batch == 0 || rows % batch != 0 || start + len > rows / batch {
            return Err(Error::Shape(format!(
                "token slice {start}..{} of {rows} rows over batch {batch}",
                start + len
            )));
        }
        let tokens = rows / batch;
        let value = self.value(x).slice_tokens(batch, tokens, start, len);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceTokens { x, batch, tokens, start }, rg))
    }

    pub fn cat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(Error::Shape(format!("cat_cols rows {ar} vs {br}")));
        }
        let mut value = Mat::zeros(ar, ac + bc);
        let (va, vb) = (self.value(a), self.value(b));
        for r in 0..ar {
            value.row_mut(r)[..ac].copy_from_slice(va.row(r));
            value.row_mut(r)[ac..].copy_from_slice(vb.row(r));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::CatCols(a, b), rg))
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(Error::Shape(format!("broadcast_rows expects one row, got {r}")));
        }
        let src = self.value(a).data.clone();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&src);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Mat { rows, cols: c, data }, Op::BroadcastRows(a), rg))
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (tr, tc) = self.shape(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tr) {
            return Err(Error::Contract(format!("embedding index {bad} out of {tr} rows")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * tc);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Mat { rows: idx.len(), cols: tc, data }, Op::GatherRows { table, idx: idx.to_vec() }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).data.iter().sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshaped(rows, cols)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// `x @ w + b` with `b` a single row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(Grads(grads))
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, gout: &Mat, grads: &mut [Option<Mat>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = Mat::zeros(va.rows, va.cols);
                    gemm(gout, false, vb, true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Mat::zeros(vb.rows, vb.cols);
                    gemm(va, true, gout, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gout.zip_map(self.value(*b), |g, y| g * y)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gout.zip_map(self.value(*a), |g, x| g * x)?);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gout.scale(*s)),
            Op::ScaleGroups { x, factors, group } => {
                let mut g = gout.clone();
                for (r, row) in g.data.chunks_mut(gout.cols).enumerate() {
                    let f = factors[r / group];
                    row.iter_mut().for_each(|v| *v *= f);
                }
                self.accumulate(grads, *x, g);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, gout.clone());
                if self.requires_grad(*row) {
                    let mut gr = Mat::zeros(1, gout.cols);
                    for chunk in gout.data.chunks(gout.cols) {
                        gr.data.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulRow(a, row) => {
                let va = self.value(*a);
                let vr = self.value(*row);
                if self.requires_grad(*a) {
                    let mut ga = gout.clone();
                    for chunk in ga.data.chunks_mut(gout.cols) {
                        chunk.iter_mut().zip(&vr.data).for_each(|(g, w)| *g *= w);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*row) {
                    let mut gr = Mat::zeros(1, gout.cols);
                    for (gc, xc) in gout.data.chunks(gout.cols).zip(va.data.chunks(gout.cols)) {
                        for c in 0..gout.cols {
                            gr.data[c] += gc[c] * xc[c];
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Gelu(a) => {
                let g = gout.zip_map(self.value(*a), |g, x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })?;
                self.accumulate(grads, *a, g);
            }
            Op::Tanh(a) => {
                let g = gout.zip_map(&node.value, |g, y| g * (1.0 - y * y))?;
                self.accumulate(grads, *a, g);
            }
            Op::Softplus(a) => {
                let g = gout.zip_map(self.value(*a), |g, x| g * sigmoid(x))?;
                self.accumulate(grads, *a, g);
            }
            Op::Square(a) => {
                let g = gout.zip_map(self.value(*a), |g, x| 2.0 * g * x)?;
                self.accumulate(grads, *a, g);
            }
            Op::RmsNorm { x, inv } => {
                let vx = self.value(*x);
                let n = vx.cols;
                let mut g = Mat::zeros(vx.rows, n);
                for r in 0..vx.rows {
                    let (xr, gr) = (vx.row(r), gout.row(r));
                    let ri = inv[r];
                    let dot_gx: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let coef = ri * ri * ri * dot_gx / n as f64;
                    for (c, out) in g.row_mut(r).iter_mut().enumerate() {
                        *out = ri * gr[c] - coef * xr[c];
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::L2Rows { x, inv } => {
                let vx = self.value(*x);
                let mut g = Mat::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    let (xr, gr) = (vx.row(r), gout.row(r));
                    let ri = inv[r];
                    let dot_gx: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let coef = ri * ri * ri * dot_gx;
                    for (c, out) in g.row_mut(r).iter_mut().enumerate() {
                        *out = ri * gr[c] - coef * xr[c];
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Attention(st) => self.attention_backward(st, gout, grads),
            Op::CatTokens { a, b, batch } => {
                let ta = self.value(*a).rows / batch;
                let tb = self.value(*b).rows / batch;
                let t = ta + tb;
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gout.slice_tokens(*batch, t, 0, ta));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gout.slice_tokens(*batch, t, ta, tb));
                }
            }
            Op::SliceTokens { x, batch, tokens, start } => {
                let vx = self.value(*x);
                let len = gout.rows / batch;
                let c = vx.cols;
                let mut g = Mat::zeros(vx.rows, c);
                for b in 0..*batch {
                    let dst = (b * tokens + start) * c;
                    g.data[dst..dst + len * c].copy_from_slice(&gout.data[b * len * c..(b + 1) * len * c]);
                }
                self.accumulate(grads, *x, g);
            }
            Op::CatCols(a, b) => {
                let ac = self.value(*a).cols;
                let bc = self.value(*b).cols;
                let mut ga = Mat::zeros(gout.rows, ac);
                let mut gb = Mat::zeros(gout.rows, bc);
                for r in 0..gout.rows {
                    ga.row_mut(r).copy_from_slice(&gout.row(r)[..ac]);
                    gb.row_mut(r).copy_from_slice(&gout.row(r)[ac..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::BroadcastRows(a) => {
                let mut g = Mat::zeros(1, gout.cols);
                for chunk in gout.data.chunks(gout.cols) {
                    g.data.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                }
                self.accumulate(grads, *a, g);
            }
            Op::GatherRows { table, idx } => {
                let vt = self.value(*table);
                let mut g = Mat::zeros(vt.rows, vt.cols);
                for (r, &i) in idx.iter().enumerate() {
                    g.row_mut(i).iter_mut().zip(gout.row(r)).for_each(|(s, x)| *s += x);
                }
                self.accumulate(grads, *table, g);
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let s = gout.data[0] / va.len() as f64;
                self.accumulate(grads, *a, Mat::filled(va.rows, va.cols, s));
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, Mat::filled(va.rows, va.cols, gout.data[0]));
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, gout.clone().reshaped(r, c)?);
            }
        }
        Ok(())
    }

    fn attention_backward(&self, st: &AttnState, gout: &Mat, grads: &mut [Option<Mat>]) {
        let (qm, km, vm) = (self.value(st.q), self.value(st.k), self.value(st.v));
        let (tq, tk) = (st.mask.queries, st.mask.keys);
        let width = qm.cols;
        let dh = width / st.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Mat::zeros(qm.rows, width);
        let mut gk = Mat::zeros(km.rows, width);
        let mut gv = Mat::zeros(vm.rows, width);
        let mut dp = vec![0.0; tk];
        for b in 0..st.batch {
            for h in 0..st.heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let pbase = ((b * st.heads + h) * tq + i) * tk;
                    let go = &gout.row(b * tq + i)[c0..c0 + dh];
                    let mut weighted = 0.0;
                    for j in 0..tk {
                        if st.mask.allows(i, j) {
                            let p = st.probs[pbase + j];
                            let vrow = &vm.row(b * tk + j)[c0..c0 + dh];
                            dp[j] = dot(go, vrow);
                            weighted += p * dp[j];
                            let gvrow = &mut gv.data[(b * tk + j) * width + c0..(b * tk + j) * width + c0 + dh];
                            gvrow.iter_mut().zip(go).for_each(|(s, g)| *s += p * g);
                        }
                    }
                    let qrow = &qm.row(b * tq + i)[c0..c0 + dh];
                    for j in 0..tk {
                        if st.mask.allows(i, j) {
                            let ds = st.probs[pbase + j] * (dp[j] - weighted) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &km.row(b * tk + j)[c0..c0 + dh];
                            let gqrow = &mut gq.data[(b * tq + i) * width + c0..(b * tq + i) * width + c0 + dh];
                            gqrow.iter_mut().zip(krow).for_each(|(s, k)| *s += ds * k);
                            let gkrow = &mut gk.data[(b * tk + j) * width + c0..(b * tk + j) * width + c0 + dh];
                            gkrow.iter_mut().zip(qrow).for_each(|(s, q)| *s += ds * q);
                        }
                    }
                }
            }
        }
        self.accumulate(grads, st.q, gq);
        self.accumulate(grads, st.k, gk);
        self.accumulate(grads, st.v, gv);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    fn check_grad(shapes: &[(usize, usize)], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<Mat> = shapes.iter().map(|&(r, c)| Mat::randn(r, c, 0.7, &mut rng)).collect();
        let mut g = Graph::new();
        let leaves: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let loss = build(&mut g, &leaves);
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        for (li, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(leaves[li], input.shape());
            for e in 0..input.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, m)| {
                            let mut m = m.clone();
                            if i == li {
                                m.data[e] += delta;
                            }
                            g2.param(m)
                        })
                        .collect();
                    let l = build(&mut g2, &vars);
                    g2.scalar_value(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data[e];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "leaf {li} elem {e}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        check_grad(&[(3, 4), (4, 2), (1, 2)], |g, v| {
            let h = g.affine(v[0], v[1], v[2]).unwrap();
            let a = g.gelu(h);
            let b = g.tanh(a);
            let c = g.softplus(b);
            let d = g.mul(c, a).unwrap();
            g.mean(d)
        });
    }

    #[test]
    fn norm_gradients() {
        check_grad(&[(3, 5), (1, 5)], |g, v| {
            let n = g.rms_norm(v[0]);
            let m = g.mul_row(n, v[1]).unwrap();
            let l = g.l2_normalize_rows(m);
            let s = g.scale(l, 1.7);
            let sq = g.square(s);
            let w = g.mul(sq, v[0]).unwrap();
            g.sum(w)
        });
    }

    #[test]
    fn attention_gradient_with_mask() {
        let mask = Rc::new(AttnMask::from_fn(3, 4, |i, j| j <= i + 1).unwrap());
        check_grad(&[(6, 4), (8, 4), (8, 4), (6, 4)], move |g, v| {
            let o = g.attention(v[0], v[1], v[2], 2, 2, mask.clone()).unwrap();
            let w = g.mul(o, v[3]).unwrap();
            g.sum(w)
        });
    }

    #[test]
    fn structural_op_gradients() {
        check_grad(&[(4, 3), (2, 3), (1, 3), (5, 2)], |g, v| {
            let cat = g.cat_tokens(v[0], v[1], 2).unwrap();
            let sl = g.slice_tokens(cat, 2, 1, 2).unwrap();
            let br = g.broadcast_rows(v[2], 4).unwrap();
            let s = g.add(sl, br).unwrap();
            let gathered = g.gather_rows(v[3], &[0, 4, 4, 2]).unwrap();
            let cc = g.cat_cols(s, gathered).unwrap();
            let sc = g.scale_groups(cc, &[0.5, -2.0]).unwrap();
            let r = g.reshape(sc, 2, 10).unwrap();
            let sq = g.square(r);
            g.mean(sq)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Mat::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        // d/dx (x * sg(x)) = sg(x)
        assert_eq!(grads.get(x).unwrap().data, vec![1.0, 2.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
