//! Reverse-mode differentiation over a linear tape of primitive ops.
//!
//! Every op appends one node whose inputs already exist on the tape, so the
//! node order is a topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, RngState, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, outer: usize, extent: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Bilinear { map: Var, pts: Var },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { base: Var, src: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Bce { h: Var, y: Tensor },
    Dice { h: Var, y: Tensor, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower clamp applied to probabilities inside the cross-entropy log.
pub const BCE_CLAMP: f64 = 1e-12;

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a node after `backward`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.value(v).shape().to_vec(), g.clone()))
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// `x[m×n] + b` with `b` holding `n` values broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(b).len() != n {
            return Err(shape_err(format!("add_row: bias of {} for width {n}", self.value(b).len())));
        }
        let bias = self.value(b).data().to_vec();
        let xv = self.value(x);
        let data = xv.data().chunks(n).flat_map(|r| r.iter().zip(&bias).map(|(p, q)| p + q)).collect();
        let v = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddRow(x, b), rg))
    }

    /// Scales row `i` of `x[m×n]` by `s[i]`, with `s` holding `m` values.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = (self.value(x).rows(), self.value(x).cols());
        if self.value(s).len() != m {
            return Err(shape_err(format!("mul_col: {} scales for {m} rows", self.value(s).len())));
        }
        let sv = self.value(s).data().to_vec();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(n)
            .zip(&sv)
            .flat_map(|(r, &k)| r.iter().map(move |p| p * k))
            .collect();
        let v = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(v, Op::MulCol(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|p| p.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(shape_err("matmul expects rank-2 operands"));
        }
        let v = av.matmul(bv)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(shape_err("transpose expects a matrix"));
        }
        let v = self.value(x).transpose();
        let rg = self.rg(x);
        Ok(self.push(v, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    // ---- normalisation -----------------------------------------------------

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(format!("softmax axis {axis} for rank {}", shape.len())));
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let mx = (0..extent).map(|e| src[at(e)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for e in 0..extent {
                    let v = (src[at(e)] - mx).exp();
                    out[at(e)] = v;
                    z += v;
                }
                for e in 0..extent {
                    out[at(e)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, outer, extent, inner }, rg))
    }

    /// Normalises each row of a matrix to zero mean and unit variance, then
    /// applies `gamma` and `beta` (each of row width).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if n < 2 {
            return Err(shape_err("layer_norm needs a row width of at least 2"));
        }
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err("layer_norm scale/shift width mismatch"));
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let xv = self.value(x);
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngState, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(p, m)| p * m).collect();
        let v = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Dropout { x, mask }, rg))
    }

    // ---- sampling ----------------------------------------------------------

    /// Bilinear reads of `map[h×w×c]` at normalised points `pts[k×2]`
    /// (`(row, col)` in `[0,1]`), see [`axis_weights`] for boundary handling.
    pub fn bilinear_sample(&mut self, map: Var, pts: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        if ms.len() != 3 {
            return Err(shape_err(format!("bilinear map must be h×w×c, got {ms:?}")));
        }
        let ps = self.shape(pts);
        if ps.len() != 2 || ps[1] != 2 {
            return Err(shape_err(format!("bilinear points must be k×2, got {ps:?}")));
        }
        let v = bilinear_forward(self.value(map), self.value(pts));
        let rg = self.rg(map) || self.rg(pts);
        Ok(self.push(v, Op::Bilinear { map, pts }, rg))
    }

    // ---- structure ---------------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != c {
                return Err(shape_err(format!("concat_rows width {} vs {c}", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let m = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != m {
                return Err(shape_err(format!("concat_cols height {} vs {m}", v.rows())));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..m {
                data[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![m, total], data), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start >= end || end > xv.rows() {
            return Err(shape_err(format!("slice_rows {start}..{end} of {:?}", xv.shape())));
        }
        let v = xv.slice_rows(start, end);
        let rg = self.rg(x);
        Ok(self.push(v, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start >= end || end > xv.cols() {
            return Err(shape_err(format!("slice_cols {start}..{end} of {:?}", xv.shape())));
        }
        let (m, n, w) = (xv.rows(), xv.cols(), end - start);
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&xv.data()[r * n + start..r * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![m, w], data), Op::SliceCols { x, start }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() {
            return Err(shape_err("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::Contract(format!("row index {bad} out of range {}", xv.rows())));
        }
        let v = xv.gather_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(v, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Copy of `base` with row `idx[r]` replaced by row `r` of `src`.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (bv, sv) = (self.value(base), self.value(src));
        if bv.cols() != sv.cols() || sv.rows() != idx.len() {
            return Err(shape_err("scatter_rows source does not match indices/width"));
        }
        let mut seen = vec![false; bv.rows()];
        for &i in idx {
            if i >= bv.rows() {
                return Err(Error::Contract(format!("row index {i} out of range {}", bv.rows())));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("duplicate scatter index {i}")));
            }
        }
        let c = bv.cols();
        let mut data = bv.data().to_vec();
        for (r, &i) in idx.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(sv.row(r));
        }
        let v = Tensor::from_parts(bv.shape().to_vec(), data);
        let rg = self.rg(base) || self.rg(src);
        Ok(self.push(v, Op::ScatterRows { base, src, idx: idx.to_vec() }, rg))
    }

    // ---- reductions and losses ---------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy between probabilities `h` and binary targets `y`.
    pub fn bce(&mut self, h: Var, y: &Tensor) -> Result<Var> {
        if self.shape(h) != y.shape() {
            return Err(shape_err(format!("bce: {:?} vs {:?}", self.shape(h), y.shape())));
        }
        let hv = self.value(h).data();
        let total: f64 = hv.iter().zip(y.data()).map(|(&p, &t)| cross_entropy(t, p)).sum();
        let v = Tensor::scalar(total / hv.len() as f64);
        let rg = self.rg(h);
        Ok(self.push(v, Op::Bce { h, y: y.clone() }, rg))
    }

    /// Row-averaged soft Dice loss `mean_j (1 - 2Σhy / (Σh + Σy + eps))`.
    pub fn dice(&mut self, h: Var, y: &Tensor, eps: f64) -> Result<Var> {
        if self.shape(h) != y.shape() || y.rank() != 2 {
            return Err(shape_err(format!("dice: {:?} vs {:?}", self.shape(h), y.shape())));
        }
        let v = Tensor::scalar(dice_value(self.value(h), y, eps));
        let rg = self.rg(h);
        Ok(self.push(v, Op::Dice { h, y: y.clone(), eps }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates d`loss`/d(node) for every node that requires a gradient.
    /// A second call without [`Tape::reset`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape; reset first".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g);
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Inputs always precede `id`, so splitting borrows the tape cleanly.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |s| add_into(s, g));
                self.acc(*b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |s| add_into(s, g));
                self.acc(*b, |s| s.iter_mut().zip(g).for_each(|(p, q)| *p -= q));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                self.acc(*a, |s| s.iter_mut().zip(g).zip(&bv).for_each(|((p, q), r)| *p += q * r));
                self.acc(*b, |s| s.iter_mut().zip(g).zip(&av).for_each(|((p, q), r)| *p += q * r));
            }
            Op::Scale(a, k) => self.acc(*a, |s| s.iter_mut().zip(g).for_each(|(p, q)| *p += q * k)),
            Op::AddRow(x, b) => {
                self.acc(*x, |s| add_into(s, g));
                let n = self.value(*b).len();
                self.acc(*b, |s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::MulCol(x, k) => {
                let n = self.value(*x).cols();
                let kv = self.value(*k).data().to_vec();
                let xv = self.value(*x).data().to_vec();
                self.acc(*x, |s| {
                    for (r, (srow, grow)) in s.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        srow.iter_mut().zip(grow).for_each(|(p, q)| *p += q * kv[r]);
                    }
                });
                self.acc(*k, |s| {
                    for (r, (xrow, grow)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                        s[r] += xrow.iter().zip(grow).map(|(p, q)| p * q).sum::<f64>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let bt = self.value(*b).transpose();
                    self.acc(*a, |s| matmul_into(g, bt.data(), s, m, n, k));
                }
                if self.rg(*b) {
                    let at = self.value(*a).transpose();
                    self.acc(*b, |s| matmul_into(at.data(), g, s, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                self.acc(*x, |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(*x, |s| add_into(s, g)),
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                self.acc(*x, |s| {
                    s.iter_mut().zip(g).zip(&xv).for_each(|((p, q), v)| {
                        if *v > 0.0 {
                            *p += q
                        }
                    })
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[id].value.data().to_vec();
                self.acc(*x, |s| s.iter_mut().zip(g).zip(&y).for_each(|((p, q), v)| *p += q * v * (1.0 - v)));
            }
            Op::Softmax { x, outer, extent, inner } => {
                let (outer, extent, inner) = (*outer, *extent, *inner);
                let y = self.nodes[id].value.data().to_vec();
                self.acc(*x, |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |e: usize| (o * extent + e) * inner + i;
                            let dot: f64 = (0..extent).map(|e| g[at(e)] * y[at(e)]).sum();
                            for e in 0..extent {
                                s[at(e)] += y[at(e)] * (g[at(e)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = self.value(*gamma).len();
                let gam = self.value(*gamma).data().to_vec();
                self.acc(*gamma, |s| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        s.iter_mut().zip(gr).zip(hr).for_each(|((p, q), h)| *p += q * h);
                    }
                });
                self.acc(*beta, |s| {
                    for gr in g.chunks(n) {
                        add_into(s, gr);
                    }
                });
                self.acc(*x, |s| {
                    let nf = n as f64;
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(&gam).map(|(q, w)| q * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / nf;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            s[r * n + j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(*x, |s| s.iter_mut().zip(g).zip(mask).for_each(|((p, q), m)| *p += q * m));
            }
            Op::Bilinear { map, pts } => {
                let (mv, pv) = (self.value(*map).clone(), self.value(*pts).clone());
                if self.rg(*map) {
                    self.acc(*map, |s| bilinear_backward_map(&mv, &pv, g, s));
                }
                if self.rg(*pts) {
                    self.acc(*pts, |s| bilinear_backward_pts(&mv, &pv, g, s));
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let seg = &g[off..off + n];
                    self.acc(p, |s| add_into(s, seg));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.value(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(p, |s| {
                        for r in 0..m {
                            add_into(&mut s[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                let off = start * c;
                self.acc(*x, |s| add_into(&mut s[off..off + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let w = self.nodes[id].value.cols();
                let start = *start;
                self.acc(*x, |s| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut s[r * n + start..r * n + start + w], gr);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                self.acc(*x, |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ScatterRows { base, src, idx } => {
                let c = self.value(*base).cols();
                self.acc(*base, |s| {
                    add_into(s, g);
                    for &i in idx {
                        s[i * c..(i + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(p, q)| *p -= q);
                    }
                });
                self.acc(*src, |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Sum(x) => self.acc(*x, |s| s.iter_mut().for_each(|p| *p += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(*x, |s| s.iter_mut().for_each(|p| *p += g[0] / n));
            }
            Op::Bce { h, y } => {
                let hv = self.value(*h).data().to_vec();
                let n = hv.len() as f64;
                self.acc(*h, |s| {
                    for ((p, &hp), &t) in s.iter_mut().zip(&hv).zip(y.data()) {
                        *p += g[0] * cross_entropy_grad(t, hp) / n;
                    }
                });
            }
            Op::Dice { h, y, eps } => {
                let hv = self.value(*h).clone();
                self.acc(*h, |s| dice_grad(&hv, y, *eps, g[0], s));
            }
        }
        self.nodes[id].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(p, q)| *p += q);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// `-(y ln p + (1-y) ln(1-p))` with `p` clamped away from 0 and 1.
pub fn cross_entropy(y: f64, p: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn cross_entropy_grad(y: f64, p: f64) -> f64 {
    if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

pub(crate) fn dice_value(h: &Tensor, y: &Tensor, eps: f64) -> f64 {
    let n = h.rows();
    let mut total = 0.0;
    for j in 0..n {
        let (hr, yr) = (h.row(j), y.row(j));
        let inter: f64 = hr.iter().zip(yr).map(|(a, b)| a * b).sum();
        let denom: f64 = hr.iter().sum::<f64>() + yr.iter().sum::<f64>() + eps;
        total += 1.0 - 2.0 * inter / denom;
    }
    total / n as f64
}

fn dice_grad(h: &Tensor, y: &Tensor, eps: f64, g: f64, s: &mut [f64]) {
    let (n, c) = (h.rows(), h.cols());
    for j in 0..n {
        let (hr, yr) = (h.row(j), y.row(j));
        let inter: f64 = hr.iter().zip(yr).map(|(a, b)| a * b).sum();
        let denom: f64 = hr.iter().sum::<f64>() + yr.iter().sum::<f64>() + eps;
        for k in 0..c {
            s[j * c + k] += g * (-2.0) * (yr[k] * denom - inter) / (denom * denom) / n as f64;
        }
    }
}

/// Interpolation weights along one axis of extent `n` for normalised
/// coordinate `p`.
///
/// Cell `i` is centred at `(i + 0.5) / n`. Inside `[0,1]` the read is
/// edge-clamped, so the half cell between the outermost centre and the
/// border replicates the edge value. Outside `[0,1]` the value tapers
/// linearly to zero over one cell (zero padding). Returns the two neighbour
/// indices (possibly out of range), their weights, and `d weight / d p`.
pub fn axis_weights(p: f64, n: usize) -> ([isize; 2], [f64; 2], [f64; 2]) {
    let nf = n as f64;
    let u = p * nf - 0.5;
    let top = nf - 1.0;
    if !(-1.5..=nf + 0.5).contains(&u) {
        // Fully in the padding; also keeps index casts in range.
        return ([-2, -1], [0.0, 0.0], [0.0, 0.0]);
    }
    let (v, slope) = if u < -0.5 {
        (u + 0.5, 1.0)
    } else if u < 0.0 {
        (0.0, 0.0)
    } else if u <= top {
        (u, 1.0)
    } else if u <= nf - 0.5 {
        (top, 0.0)
    } else {
        (u - 0.5, 1.0)
    };
    let i0 = v.floor();
    let f = v - i0;
    let d = slope * nf;
    ([i0 as isize, i0 as isize + 1], [1.0 - f, f], [-d, d])
}

fn bilinear_forward(map: &Tensor, pts: &Tensor) -> Tensor {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let k = pts.rows();
    let md = map.data();
    let mut out = vec![0.0; k * c];
    for r in 0..k {
        let (ri, rw, _) = axis_weights(pts.get2(r, 0), h);
        let (ci, cw, _) = axis_weights(pts.get2(r, 1), w);
        let orow = &mut out[r * c..(r + 1) * c];
        for a in 0..2 {
            for b in 0..2 {
                let (y, x) = (ri[a], ci[b]);
                let wt = rw[a] * cw[b];
                if wt == 0.0 || y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let base = (y as usize * w + x as usize) * c;
                orow.iter_mut().zip(&md[base..base + c]).for_each(|(o, v)| *o += wt * v);
            }
        }
    }
    Tensor::from_parts(vec![k, c], out)
}

fn bilinear_backward_map(map: &Tensor, pts: &Tensor, g: &[f64], s: &mut [f64]) {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    for r in 0..pts.rows() {
        let (ri, rw, _) = axis_weights(pts.get2(r, 0), h);
        let (ci, cw, _) = axis_weights(pts.get2(r, 1), w);
        let grow = &g[r * c..(r + 1) * c];
        for a in 0..2 {
            for b in 0..2 {
                let (y, x) = (ri[a], ci[b]);
                let wt = rw[a] * cw[b];
                if wt == 0.0 || y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let base = (y as usize * w + x as usize) * c;
                s[base..base + c].iter_mut().zip(grow).for_each(|(p, q)| *p += wt * q);
            }
        }
    }
}

fn bilinear_backward_pts(map: &Tensor, pts: &Tensor, g: &[f64], s: &mut [f64]) {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let md = map.data();
    for r in 0..pts.rows() {
        let (ri, rw, rd) = axis_weights(pts.get2(r, 0), h);
        let (ci, cw, cd) = axis_weights(pts.get2(r, 1), w);
        let grow = &g[r * c..(r + 1) * c];
        for a in 0..2 {
            for b in 0..2 {
                let (y, x) = (ri[a], ci[b]);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let base = (y as usize * w + x as usize) * c;
                let dot: f64 = md[base..base + c].iter().zip(grow).map(|(p, q)| p * q).sum();
                s[r * 2] += rd[a] * cw[b] * dot;
                s[r * 2 + 1] += rw[a] * cd[b] * dot;
            }
        }
    }
}
