//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output tensor plus whatever it needs for the backward
//! rule; [`Graph::backward`] walks the nodes in exact reverse append order and
//! sums gradient contributions into each input. Parameters live outside the
//! graph in a [`ParamStore`] and are copied in on first use, so one store can
//! serve many graphs.
//!
//! Row-wise operations (softmax, layer norm, affine maps, ...) view their
//! operands as `rows x cols` matrices, which is how a leading batch dimension
//! is carried through without any broadcasting rules.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kernels::{self, matmul_into};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows { x: Var, s: Var },
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    GatherCols { x: Var, idx: Vec<usize> },
    GatherRows { table: Var, ids: Vec<usize> },
    Aggregate { w: Var, idx: Vec<usize>, values: Var },
    L2NormalizeRows { x: Var, norms: Vec<T>, eps: T },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Contract3 { f: Var, a: Var, b: Var },
    Outer3 { v: Var, a: Var, b: Var },
    FactoredContract { terms: Vec<[Var; 3]>, p: Var, q: Var, ap: Vec<T>, bq: Vec<T> },
    WeightedSum { x: Var, weights: Vec<T> },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Adds a leaf. It receives a gradient iff `tensor.requires_grad`.
    pub fn input(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        self.nodes.push(Node { value: tensor, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.input(tensor)
    }

    /// The node for parameter `id`, created from the store on first use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let mut t = store.tensor(id).clone();
        t.grad = None;
        t.requires_grad = true;
        self.nodes.push(Node { value: t, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    /// The parameter a node was created from, if any.
    pub fn param_id(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    /// Parameters registered in this graph, with their nodes.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    // ---- shape helpers -------------------------------------------------

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(format!("{what}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn with_last_dim(&self, v: Var, last: usize) -> Vec<usize> {
        let mut s = self.shape(v).to_vec();
        *s.last_mut().expect("rank >= 1") = last;
        s
    }

    // ---- linear algebra ------------------------------------------------

    /// `a[m x k] * b[k x n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: [{m}x{k}] * [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `a[m x k] * b[n x k]^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_bt")?;
        let (n, k2) = self.matrix(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_bt: [{m}x{k}] * [{n}x{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.data(a), false, self.data(b), true, &mut out, false);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    /// Row-wise `x * w + b` with `w[in x out]`, `b[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        let (fan_in, fan_out) = self.matrix(w, "affine")?;
        if cols != fan_in || self.value(b).len() != fan_out {
            return Err(Error::dim(format!(
                "affine: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out = Vec::with_capacity(rows * fan_out);
        for _ in 0..rows {
            out.extend_from_slice(self.data(b));
        }
        matmul_into(rows, fan_in, fan_out, self.data(x), false, self.data(w), false, &mut out, true);
        let shape = self.with_last_dim(x, fan_out);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Affine { x, w, b }, &[x, w, b]))
    }

    // ---- elementwise ---------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, op, &[a, b]))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out).expect("same shape"), op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    /// Multiplies row `r` of `x` by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if self.value(s).len() != rows {
            return Err(Error::dim(format!(
                "scale_rows: {rows} rows but {} scales",
                self.value(s).len()
            )));
        }
        let xd = self.data(x);
        let sd = self.data(s);
        let out = (0..rows * cols).map(|i| xd[i] * sd[i / cols]).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::ScaleRows { x, s }, &[x, s]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    // ---- row-wise ------------------------------------------------------

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (rows, cols) = self.rows_cols(x);
        let mut out = self.data(x).to_vec();
        for r in 0..rows {
            kernels::softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, out).expect("same shape"), Op::Softmax(x), &[x])
    }

    /// `(x - mean) / sqrt(var + 1e-5) * gain + bias` over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if cols < 2 {
            return Err(Error::dim("layer_norm: needs at least 2 features"));
        }
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::dim(format!(
                "layer_norm: {cols} features, gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let n = T::from_usize(cols).expect("usize fits");
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = (var + eps).sqrt().recip();
            rstd.push(s);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * s;
                xhat.push(h);
                out.push(h * gd[c] + bd[c]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`. Identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} not in [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rows_cols(logits);
        if targets.len() != rows {
            return Err(Error::dim(format!(
                "cross_entropy: {rows} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Index(format!("target class {t} with {cols} classes")));
        }
        let ld = self.data(logits);
        let mut probs = ld.to_vec();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * cols..(r + 1) * cols];
            loss = loss + kernels::log_sum_exp(row) - row[t];
            kernels::softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
        }
        let loss = loss / T::from_usize(rows).expect("usize fits");
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    /// Picks `idx[r*k + j]` from row `r`; output is `rows x k`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if idx.len() != rows * k {
            return Err(Error::dim(format!("gather_cols: {} indices for {rows}x{k}", idx.len())));
        }
        if let Some(&i) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::Index(format!("gather_cols: column {i} of {cols}")));
        }
        let xd = self.data(x);
        let out = idx.iter().enumerate().map(|(n, &i)| xd[(n / k) * cols + i]).collect();
        let shape = self.with_last_dim(x, k);
        Ok(self.push(Tensor::new(&shape, out)?, Op::GatherCols { x, idx: idx.to_vec() }, &[x]))
    }

    /// Embedding lookup: rows `ids` of `table[n x d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix(table, "gather_rows")?;
        if let Some(&i) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("gather_rows: row {i} of {n}")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::GatherRows { table, ids: ids.to_vec() },
            &[table],
        ))
    }

    /// `out[r] = sum_j w[r, j] * values[idx[r*k + j]]` with `w[rows x k]`.
    pub fn aggregate(&mut self, w: Var, idx: &[usize], values: Var) -> Result<Var> {
        let (rows, k) = self.rows_cols(w);
        let (n, d) = self.matrix(values, "aggregate")?;
        if idx.len() != rows * k {
            return Err(Error::dim(format!("aggregate: {} indices for {rows}x{k}", idx.len())));
        }
        if let Some(&i) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("aggregate: value row {i} of {n}")));
        }
        let (wd, vd) = (self.data(w), self.data(values));
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..k {
                let i = idx[r * k + j];
                kernels::axpy(wd[r * k + j], &vd[i * d..(i + 1) * d], o);
            }
        }
        let shape = self.with_last_dim(w, d);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Aggregate { w, idx: idx.to_vec(), values },
            &[w, values],
        ))
    }

    /// Each row divided by `max(||row||, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let (rows, cols) = self.rows_cols(x);
        let xd = self.data(x);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let n = kernels::norm(row);
            norms.push(n);
            let d = n.max(eps);
            out.extend(row.iter().map(|&v| v / d));
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(&shape, out).expect("same shape"),
            Op::L2NormalizeRows { x, norms, eps },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols: no inputs"))?;
        let rows = self.rows_cols(first).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.rows_cols(p).1).collect();
        if parts.iter().any(|&p| self.rows_cols(p).0 != rows) {
            return Err(Error::dim("concat_cols: row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let shape = self.with_last_dim(first, total);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if len == 0 || start + len > cols {
            return Err(Error::dim(format!("slice_cols: [{start}, {}) of {cols}", start + len)));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        let shape = self.with_last_dim(x, len);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SliceCols { x, start }, &[x]))
    }

    // ---- order-3 tensor products ---------------------------------------

    fn order3_dims(&self, f: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(f) {
            [d1, d2, d3] if d1 == d2 && d2 == d3 => Ok((1, d1)),
            [b, d1, d2, d3] if d1 == d2 && d2 == d3 => Ok((b, d1)),
            ref s => Err(Error::dim(format!("{what}: expected [d,d,d] or [B,d,d,d], got {s:?}"))),
        }
    }

    fn check_vectors(&self, vs: &[Var], batch: usize, d: usize, what: &str) -> Result<()> {
        for &v in vs {
            if self.rows_cols(v) != (batch, d) {
                return Err(Error::dim(format!(
                    "{what}: operand {:?} does not match batch {batch}, dim {d}",
                    self.shape(v)
                )));
            }
        }
        Ok(())
    }

    /// `out[i] = sum_{j,k} F[i,j,k] a[j] b[k]`, optionally batched over a
    /// leading dimension.
    pub fn contract3(&mut self, f: Var, a: Var, b: Var) -> Result<Var> {
        let (batch, d) = self.order3_dims(f, "contract3")?;
        self.check_vectors(&[a, b], batch, d, "contract3")?;
        let (fd, ad, bd) = (self.data(f), self.data(a), self.data(b));
        let mut out = vec![T::zero(); batch * d];
        let mut kron = vec![T::zero(); d * d];
        for n in 0..batch {
            outer2(&ad[n * d..(n + 1) * d], &bd[n * d..(n + 1) * d], &mut kron);
            let fblock = &fd[n * d * d * d..(n + 1) * d * d * d];
            matmul_into(d, d * d, 1, fblock, false, &kron, false, &mut out[n * d..(n + 1) * d], false);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Contract3 { f, a, b }, &[f, a, b]))
    }

    /// `out[i,j,k] = v[i] a[j] b[k]`, optionally batched.
    pub fn outer3(&mut self, v: Var, a: Var, b: Var) -> Result<Var> {
        let (batch, d) = self.rows_cols(v);
        self.check_vectors(&[a, b], batch, d, "outer3")?;
        let (vd, ad, bd) = (self.data(v), self.data(a), self.data(b));
        let mut out = vec![T::zero(); batch * d * d * d];
        let mut kron = vec![T::zero(); d * d];
        for n in 0..batch {
            outer2(&ad[n * d..(n + 1) * d], &bd[n * d..(n + 1) * d], &mut kron);
            let block = &mut out[n * d * d * d..(n + 1) * d * d * d];
            for i in 0..d {
                let vi = vd[n * d + i];
                for (o, &kv) in block[i * d * d..(i + 1) * d * d].iter_mut().zip(&kron) {
                    *o = vi * kv;
                }
            }
        }
        let shape = if self.rank_of(v) == 1 { vec![d, d, d] } else { vec![batch, d, d, d] };
        Ok(self.push(Tensor::new(&shape, out)?, Op::Outer3 { v, a, b }, &[v, a, b]))
    }

    /// Contracts a memory kept in factored form. With
    /// `F = sum_s u_s (x) a_s (x) b_s`, returns `F . (p (x) q)`, i.e.
    /// `sum_s u_s <a_s, p> <b_s, q>`, row by row. Equals
    /// `contract3(sum_s outer3(u_s, a_s, b_s), p, q)` without materializing
    /// the order-3 tensor.
    pub fn factored_contract(&mut self, terms: &[[Var; 3]], p: Var, q: Var) -> Result<Var> {
        let (batch, d) = self.rows_cols(p);
        self.check_vectors(&[q], batch, d, "factored_contract")?;
        for t in terms {
            self.check_vectors(t, batch, d, "factored_contract")?;
        }
        let (pd, qd) = (self.data(p), self.data(q));
        let mut out = vec![T::zero(); batch * d];
        let mut ap = Vec::with_capacity(terms.len() * batch);
        let mut bq = Vec::with_capacity(terms.len() * batch);
        for &[u, a, b] in terms {
            let (ud, ad, bd) = (self.data(u), self.data(a), self.data(b));
            for n in 0..batch {
                let r = n * d..(n + 1) * d;
                let x = kernels::dot(&ad[r.clone()], &pd[r.clone()]);
                let y = kernels::dot(&bd[r.clone()], &qd[r.clone()]);
                kernels::axpy(x * y, &ud[r.clone()], &mut out[r]);
                ap.push(x);
                bq.push(y);
            }
        }
        let shape = self.shape(p).to_vec();
        let mut inputs: Vec<Var> = terms.iter().flatten().copied().collect();
        inputs.extend([p, q]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::FactoredContract { terms: terms.to_vec(), p, q, ap, bq },
            &inputs,
        ))
    }

    // ---- reductions ----------------------------------------------------

    /// `sum_i x[i] * weights[i]` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::dim("weighted_sum: length mismatch"));
        }
        let s = kernels::dot(self.data(x), weights);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    fn rank_of(&self, v: Var) -> usize {
        self.value(v).rank()
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from scalar `root`. Afterwards every node that depends on
    /// a gradient-requiring leaf holds `d root / d node` in its `grad`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].value.requires_grad {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.value.requires_grad { g } else { None };
        }
        Ok(())
    }

    /// Adds this graph's parameter gradients into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (id, v) in self.params() {
            if let (Some(g), Some(acc)) = (self.grad(v), store.tensor_mut(id).grad.as_mut()) {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a = *a + x;
                }
            }
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| self.nodes[v.0].value.data();
        // Gradient buffer for `v`, or None if `v` does not need one.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if self.rg(v) {
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]))
                } else {
                    None
                }
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.rows_cols(a);
                let n = out.cols();
                if let Some(da) = buf!(a) {
                    // dA = dC * B^T  (or dC * B when b is stored transposed)
                    matmul_into(m, n, k, g, false, val(b), !trans_b, da, true);
                }
                if let Some(db) = buf!(b) {
                    if trans_b {
                        matmul_into(n, m, k, g, true, val(a), false, db, true);
                    } else {
                        matmul_into(k, m, n, val(a), true, g, false, db, true);
                    }
                }
            }
            &Op::Affine { x, w, b } => {
                let (rows, fan_in) = self.rows_cols(x);
                let fan_out = out.cols();
                if let Some(dx) = buf!(x) {
                    matmul_into(rows, fan_out, fan_in, g, false, val(w), true, dx, true);
                }
                if let Some(dw) = buf!(w) {
                    matmul_into(fan_in, rows, fan_out, val(x), true, g, false, dw, true);
                }
                if let Some(db) = buf!(b) {
                    for r in 0..rows {
                        kernels::axpy(T::one(), &g[r * fan_out..(r + 1) * fan_out], db);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = buf!(a) {
                    kernels::axpy(T::one(), g, da);
                }
                if let Some(db) = buf!(b) {
                    kernels::axpy(T::one(), g, db);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = buf!(a) {
                    kernels::axpy(T::one(), g, da);
                }
                if let Some(db) = buf!(b) {
                    kernels::axpy(-T::one(), g, db);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(da) = buf!(a) {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(val(b)) {
                        *d = *d + gi * bi;
                    }
                }
                if let Some(db) = buf!(b) {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(val(a)) {
                        *d = *d + gi * ai;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(da) = buf!(a) {
                    kernels::axpy(s, g, da);
                }
            }
            &Op::ScaleRows { x, s } => {
                let cols = out.cols();
                if let Some(dx) = buf!(x) {
                    let sd = val(s);
                    for (n, d) in dx.iter_mut().enumerate() {
                        *d = *d + g[n] * sd[n / cols];
                    }
                }
                if let Some(ds) = buf!(s) {
                    let xd = val(x);
                    for (r, d) in ds.iter_mut().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        *d = *d + kernels::dot(&g[span.clone()], &xd[span]);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(da) = buf!(a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(out.data()) {
                        *d = *d + gi * y * (T::one() - y);
                    }
                }
            }
            &Op::Tanh(a) => {
                if let Some(da) = buf!(a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(out.data()) {
                        *d = *d + gi * (T::one() - y * y);
                    }
                }
            }
            &Op::Softmax(x) => {
                let (rows, cols) = (out.rows(), out.cols());
                if let Some(dx) = buf!(x) {
                    let y = out.data();
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let s = kernels::dot(&g[span.clone()], &y[span.clone()]);
                        for c in span {
                            dx[c] = dx[c] + y[c] * (g[c] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (rows, cols) = (out.rows(), out.cols());
                let gd = val(*gain);
                if let Some(dg) = buf!(*gain) {
                    for n in 0..rows * cols {
                        dg[n % cols] = dg[n % cols] + g[n] * xhat[n];
                    }
                }
                if let Some(db) = buf!(*bias) {
                    for n in 0..rows * cols {
                        db[n % cols] = db[n % cols] + g[n];
                    }
                }
                if let Some(dx) = buf!(*x) {
                    let inv_n = T::from_usize(cols).expect("usize fits").recip();
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in span.clone() {
                            let dh = g[c] * gd[c % cols];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[c];
                        }
                        mean_dh = mean_dh * inv_n;
                        mean_dh_h = mean_dh_h * inv_n;
                        for c in span {
                            let dh = g[c] * gd[c % cols];
                            dx[c] = dx[c] + rstd[r] * (dh - mean_dh - xhat[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = buf!(*x) {
                    for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d = *d + gi * m;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(dz) = buf!(*logits) {
                    let cols = probs.len() / targets.len();
                    let scale = g[0] / T::from_usize(targets.len()).expect("usize fits");
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            let n = r * cols + c;
                            dz[n] = dz[n] + scale * (probs[n] - onehot);
                        }
                    }
                }
            }
            Op::GatherCols { x, idx } => {
                if let Some(dx) = buf!(*x) {
                    let cols = self.rows_cols(*x).1;
                    let k = out.cols();
                    for (n, &c) in idx.iter().enumerate() {
                        let j = (n / k) * cols + c;
                        dx[j] = dx[j] + g[n];
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(dt) = buf!(*table) {
                    let d = out.cols();
                    for (n, &row) in ids.iter().enumerate() {
                        kernels::axpy(T::one(), &g[n * d..(n + 1) * d], &mut dt[row * d..(row + 1) * d]);
                    }
                }
            }
            Op::Aggregate { w, idx, values } => {
                let d = out.cols();
                let k = self.rows_cols(*w).1;
                let vd = val(*values);
                if let Some(dw) = buf!(*w) {
                    for (n, &i) in idx.iter().enumerate() {
                        let r = n / k;
                        dw[n] = dw[n] + kernels::dot(&g[r * d..(r + 1) * d], &vd[i * d..(i + 1) * d]);
                    }
                }
                if let Some(dv) = buf!(*values) {
                    let wd = val(*w);
                    for (n, &i) in idx.iter().enumerate() {
                        let r = n / k;
                        kernels::axpy(wd[n], &g[r * d..(r + 1) * d], &mut dv[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                if let Some(dx) = buf!(*x) {
                    let cols = out.cols();
                    let y = out.data();
                    for (r, &n) in norms.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        if n > *eps {
                            let yg = kernels::dot(&y[span.clone()], &g[span.clone()]);
                            for c in span {
                                dx[c] = dx[c] + (g[c] - y[c] * yg) / n;
                            }
                        } else {
                            for c in span {
                                dx[c] = dx[c] + g[c] / *eps;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.rows_cols(p).1;
                    if let Some(dp) = buf!(p) {
                        for r in 0..rows {
                            kernels::axpy(
                                T::one(),
                                &g[r * total + offset..r * total + offset + w],
                                &mut dp[r * w..(r + 1) * w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceCols { x, start } => {
                if let Some(dx) = buf!(x) {
                    let cols = self.rows_cols(x).1;
                    let (rows, len) = (out.rows(), out.cols());
                    for r in 0..rows {
                        kernels::axpy(
                            T::one(),
                            &g[r * len..(r + 1) * len],
                            &mut dx[r * cols + start..r * cols + start + len],
                        );
                    }
                }
            }
            &Op::Contract3 { f, a, b } => {
                let (batch, d) = (out.rows(), out.cols());
                let (fd, ad, bd) = (val(f), val(a), val(b));
                let cube = d * d * d;
                let mut kron = vec![T::zero(); d * d];
                let mut gk = vec![T::zero(); d * d];
                let need_f = self.rg(f);
                let need_ab = self.rg(a) || self.rg(b);
                for n in 0..batch {
                    let gn = &g[n * d..(n + 1) * d];
                    let (an, bn) = (&ad[n * d..(n + 1) * d], &bd[n * d..(n + 1) * d]);
                    if need_f {
                        outer2(an, bn, &mut kron);
                        let df = buf!(f).expect("checked");
                        // dF[i, jk] += g[i] * kron[jk]
                        matmul_into(d, 1, d * d, gn, false, &kron, false, &mut df[n * cube..(n + 1) * cube], true);
                    }
                    if need_ab {
                        // gk[jk] = sum_i g[i] F[i, jk]
                        matmul_into(1, d, d * d, gn, false, &fd[n * cube..(n + 1) * cube], false, &mut gk, false);
                        if let Some(da) = buf!(a) {
                            for j in 0..d {
                                da[n * d + j] = da[n * d + j] + kernels::dot(&gk[j * d..(j + 1) * d], bn);
                            }
                        }
                        if let Some(db) = buf!(b) {
                            for j in 0..d {
                                kernels::axpy(an[j], &gk[j * d..(j + 1) * d], &mut db[n * d..(n + 1) * d]);
                            }
                        }
                    }
                }
            }
            &Op::Outer3 { v, a, b } => {
                let (batch, d) = self.rows_cols(v);
                let (vd, ad, bd) = (val(v), val(a), val(b));
                let cube = d * d * d;
                let mut kron = vec![T::zero(); d * d];
                let mut gk = vec![T::zero(); d * d];
                for n in 0..batch {
                    let gn = &g[n * cube..(n + 1) * cube];
                    let (vn, an, bn) =
                        (&vd[n * d..(n + 1) * d], &ad[n * d..(n + 1) * d], &bd[n * d..(n + 1) * d]);
                    if let Some(dv) = buf!(v) {
                        outer2(an, bn, &mut kron);
                        matmul_into(d, d * d, 1, gn, false, &kron, false, &mut dv[n * d..(n + 1) * d], true);
                    }
                    if self.rg(a) || self.rg(b) {
                        matmul_into(1, d, d * d, vn, false, gn, false, &mut gk, false);
                        if let Some(da) = buf!(a) {
                            for j in 0..d {
                                da[n * d + j] = da[n * d + j] + kernels::dot(&gk[j * d..(j + 1) * d], bn);
                            }
                        }
                        if let Some(db) = buf!(b) {
                            for j in 0..d {
                                kernels::axpy(an[j], &gk[j * d..(j + 1) * d], &mut db[n * d..(n + 1) * d]);
                            }
                        }
                    }
                }
            }
            Op::FactoredContract { terms, p, q, ap, bq } => {
                let (batch, d) = (out.rows(), out.cols());
                let (pd, qd) = (val(*p), val(*q));
                for (s, &[u, a, b]) in terms.iter().enumerate() {
                    let (ud, ad, bd) = (val(u), val(a), val(b));
                    for n in 0..batch {
                        let r = n * d..(n + 1) * d;
                        let (x, y) = (ap[s * batch + n], bq[s * batch + n]);
                        if let Some(du) = buf!(u) {
                            kernels::axpy(x * y, &g[r.clone()], &mut du[r.clone()]);
                        }
                        let gu = kernels::dot(&g[r.clone()], &ud[r.clone()]);
                        let (dx, dy) = (gu * y, gu * x);
                        if let Some(da) = buf!(a) {
                            kernels::axpy(dx, &pd[r.clone()], &mut da[r.clone()]);
                        }
                        if let Some(dp) = buf!(*p) {
                            kernels::axpy(dx, &ad[r.clone()], &mut dp[r.clone()]);
                        }
                        if let Some(db) = buf!(b) {
                            kernels::axpy(dy, &qd[r.clone()], &mut db[r.clone()]);
                        }
                        if let Some(dq) = buf!(*q) {
                            kernels::axpy(dy, &bd[r.clone()], &mut dq[r.clone()]);
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(dx) = buf!(*x) {
                    kernels::axpy(g[0], weights, dx);
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = buf!(x) {
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn outer2<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    let d = b.len();
    for (j, &aj) in a.iter().enumerate() {
        for (o, &bk) in out[j * d..(j + 1) * d].iter_mut().zip(b) {
            *o = aj * bk;
        }
    }
}
