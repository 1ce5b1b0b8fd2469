//! Define-by-run tape. Every primitive appends exactly one node; `backward`
//! replays the nodes in reverse execution order.

use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Slice { x: Var, start: usize },
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, padded_len: usize },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    Dot(Var, Var),
    Sum(Var),
    EmbedColumns { table: Var, indices: Vec<usize> },
    Ln(Var),
    Exp(Var),
    ClampMin { x: Var, min: f64 },
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatVec(..) => "matvec",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool1d { .. } => "max_pool1d",
            Op::Dot(..) => "dot",
            Op::Sum(_) => "sum",
            Op::EmbedColumns { .. } => "embed_columns",
            Op::Ln(_) => "ln",
            Op::Exp(_) => "exp",
            Op::ClampMin { .. } => "clamp_min",
            Op::ScaleRows(..) => "scale_rows",
            Op::ScaleCols(..) => "scale_cols",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<(), AutodiffError> {
    if t.shape().len() == rank {
        Ok(())
    } else {
        Err(AutodiffError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        })
    }
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

    /// Adds a leaf. Gradients are accumulated into it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a non-trainable leaf.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Adds a trainable copy of `t` with a fresh zero gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, `None` if it does not require grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = self.inputs(&op).iter().any(|x| self.needs_grad(*x));
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Whether any trainable leaf lies upstream of `v`.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatVec(a, b)
            | Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Dot(a, b)
            | Op::ScaleRows(a, b)
            | Op::ScaleCols(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Ln(x)
            | Op::Exp(x) => vec![*x],
            Op::Slice { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::MaxPool1d { x, .. }
            | Op::ClampMin { x, .. } => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::EmbedColumns { table, .. } => vec![*table],
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `A x` for `A: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var, AutodiffError> {
        let (av, xv) = (self.value(a), self.value(x));
        expect_rank("matvec", av, 2)?;
        if xv.shape() != [av.cols()] {
            return Err(mismatch("matvec", av, xv));
        }
        let (m, n) = (av.rows(), av.cols());
        let (ad, xd) = (av.data(), xv.data());
        let out: Vec<f64> = (0..m)
            .map(|i| {
                ad[i * n..(i + 1) * n]
                    .iter()
                    .zip(xd)
                    .map(|(p, q)| p * q)
                    .sum()
            })
            .collect();
        Ok(self.push(Op::MatVec(a, x), Tensor::vector(out)))
    }

    /// `A B` for `A: [m, k]`, `B: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("matmul", av, 2)?;
        expect_rank("matmul", bv, 2)?;
        if av.cols() != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul(a, b), t))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        expect_rank("transpose", xv, 2)?;
        let (r, c) = (xv.rows(), xv.cols());
        let t = Tensor::matrix(c, r, transpose_raw(xv.data(), r, c))?;
        Ok(self.push(Op::Transpose(x), t))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("dot", av, bv));
        }
        let s = av.data().iter().zip(bv.data()).map(|(p, q)| p * q).sum();
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(s)))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op.name(), av, bv));
        }
        let out = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(op, t))
    }

    fn map(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(op, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with(Op::Add(a, b), a, b, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with(Op::Sub(a, b), a, b, |p, q| p - q)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with(Op::Mul(a, b), a, b, |p, q| p * q)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.map(Op::Scale(x, k), x, |v| v * k)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(Op::Tanh(x), x, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(Op::Sigmoid(x), x, sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(Op::Relu(x), x, |v| v.max(0.0))
    }

    /// Natural log; the input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Var {
        self.map(Op::Ln(x), x, f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(Op::Exp(x), x, f64::exp)
    }

    /// `max(x, min)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        self.map(Op::ClampMin { x, min }, x, |v| v.max(min))
    }

    /// `out[i, j] = m[i, j] * v[i]`.
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Result<Var, AutodiffError> {
        let (mv, vv) = (self.value(m), self.value(v));
        expect_rank("scale_rows", mv, 2)?;
        if vv.shape() != [mv.rows()] {
            return Err(mismatch("scale_rows", mv, vv));
        }
        let c = mv.cols();
        let out = mv
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| x * vv.data()[k / c])
            .collect();
        let t = Tensor::new(mv.shape().to_vec(), out)?;
        Ok(self.push(Op::ScaleRows(m, v), t))
    }

    /// `out[i, j] = m[i, j] * v[j]`.
    pub fn scale_cols(&mut self, m: Var, v: Var) -> Result<Var, AutodiffError> {
        let (mv, vv) = (self.value(m), self.value(v));
        expect_rank("scale_cols", mv, 2)?;
        if vv.shape() != [mv.cols()] {
            return Err(mismatch("scale_cols", mv, vv));
        }
        let c = mv.cols();
        let out = mv
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| x * vv.data()[k % c])
            .collect();
        let t = Tensor::new(mv.shape().to_vec(), out)?;
        Ok(self.push(Op::ScaleCols(m, v), t))
    }

    // ---- structure ------------------------------------------------------

    /// Softmax over a vector. Masked entries are exactly zero and receive no
    /// gradient.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        expect_rank("softmax", xv, 1)?;
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "softmax",
                    left: xv.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let out = softmax_raw(xv.data(), mask)?;
        Ok(self.push(Op::Softmax(x), Tensor::vector(out)))
    }

    /// Flattening concatenation of any number of tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, AutodiffError> {
        if xs.is_empty() {
            return Err(AutodiffError::Empty("concat"));
        }
        let mut out = Vec::new();
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        Ok(self.push(Op::Concat(xs.to_vec()), Tensor::vector(out)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(x).reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape(x), t))
    }

    /// Contiguous slice `[start, start + len)` of the flattened data.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.len() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: xv.len(),
            });
        }
        let t = Tensor::vector(xv.data()[start..start + len].to_vec());
        Ok(self.push(Op::Slice { x, start }, t))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Mean of a matrix along `axis` (0 = over rows, 1 = over columns).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        expect_rank("mean_axis", xv, 2)?;
        let (r, c) = (xv.rows(), xv.cols());
        let d = xv.data();
        let out: Vec<f64> = match axis {
            0 => (0..c)
                .map(|j| (0..r).map(|i| d[i * c + j]).sum::<f64>() / r as f64)
                .collect(),
            1 => (0..r)
                .map(|i| d[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                .collect(),
            _ => return Err(AutodiffError::Axis { op: "mean_axis", axis }),
        };
        Ok(self.push(Op::MeanAxis { x, axis }, Tensor::vector(out)))
    }

    /// Max of a matrix along `axis`; ties resolve to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        expect_rank("max_axis", xv, 2)?;
        let (r, c) = (xv.rows(), xv.cols());
        let d = xv.data();
        let (outer, inner, idx): (usize, usize, Box<dyn Fn(usize, usize) -> usize>) = match axis {
            0 => (c, r, Box::new(move |o, i| i * c + o)),
            1 => (r, c, Box::new(move |o, i| o * c + i)),
            _ => return Err(AutodiffError::Axis { op: "max_axis", axis }),
        };
        let mut out = Vec::with_capacity(outer);
        let mut argmax = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best = idx(o, 0);
            for i in 1..inner {
                let k = idx(o, i);
                if d[k] > d[best] {
                    best = k;
                }
            }
            out.push(d[best]);
            argmax.push(best);
        }
        Ok(self.push(Op::MaxAxis { x, argmax }, Tensor::vector(out)))
    }

    /// Valid 1-D convolution.
    ///
    /// `x` is `[L]` (one channel) or `[c_in, L]`; `w` is `[c_out, c_in, k]`;
    /// `b` is `[c_out]`. Output is `[c_out, (L' - k) / stride + 1]` where
    /// `L' = max(L, k)`: inputs shorter than the kernel are right-padded with
    /// zeros.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, AutodiffError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        expect_rank("conv1d", wv, 3)?;
        let (c_out, c_in, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        let (xc, len) = match xv.shape() {
            [l] => (1, *l),
            [c, l] => (*c, *l),
            _ => return Err(mismatch("conv1d", xv, wv)),
        };
        if xc != c_in {
            return Err(mismatch("conv1d", xv, wv));
        }
        if bv.shape() != [c_out] {
            return Err(mismatch("conv1d", wv, bv));
        }
        if stride == 0 {
            return Err(AutodiffError::Axis { op: "conv1d", axis: 0 });
        }
        let padded_len = len.max(k);
        let out_len = (padded_len - k) / stride + 1;
        let xd = xv.data();
        let wd = wv.data();
        let mut out = vec![0.0; c_out * out_len];
        for o in 0..c_out {
            let row = &mut out[o * out_len..(o + 1) * out_len];
            row.iter_mut().for_each(|v| *v = bv.data()[o]);
            for c in 0..c_in {
                let xs = &xd[c * len..(c + 1) * len];
                let ws = &wd[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                for (t, acc) in row.iter_mut().enumerate() {
                    let start = t * stride;
                    let end = (start + k).min(len);
                    if start < end {
                        *acc += xs[start..end]
                            .iter()
                            .zip(ws)
                            .map(|(p, q)| p * q)
                            .sum::<f64>();
                    }
                }
            }
        }
        let t = Tensor::matrix(c_out, out_len, out)?;
        Ok(self.push(
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padded_len,
            },
            t,
        ))
    }

    /// Max-pooling along the last axis of `[C, L]`. Windows start at
    /// `0, stride, 2 * stride, ...` while they fit; an input shorter than
    /// `width` becomes a single window.
    pub fn max_pool1d(&mut self, x: Var, width: usize, stride: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        expect_rank("max_pool1d", xv, 2)?;
        if width == 0 || stride == 0 {
            return Err(AutodiffError::Axis { op: "max_pool1d", axis: 1 });
        }
        let (ch, len) = (xv.rows(), xv.cols());
        let out_len = if len < width { 1 } else { (len - width) / stride + 1 };
        let d = xv.data();
        let mut out = Vec::with_capacity(ch * out_len);
        let mut argmax = Vec::with_capacity(ch * out_len);
        for c in 0..ch {
            for t in 0..out_len {
                let start = c * len + t * stride;
                let end = c * len + (t * stride + width).min(len);
                let mut best = start;
                for k in start + 1..end {
                    if d[k] > d[best] {
                        best = k;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let t = Tensor::matrix(ch, out_len, out)?;
        Ok(self.push(Op::MaxPool1d { x, argmax }, t))
    }

    /// Column lookup: row `r` of the `[n, d]` output is column `indices[r]`
    /// of the `[d, V]` table.
    pub fn embed_columns(&mut self, table: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let tv = self.value(table);
        expect_rank("embed_columns", tv, 2)?;
        if indices.is_empty() {
            return Err(AutodiffError::Empty("embed_columns"));
        }
        let (d, vocab) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            if idx >= vocab {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embed_columns",
                    index: idx,
                    bound: vocab,
                });
            }
            out.extend((0..d).map(|r| tv.data()[r * vocab + idx]));
        }
        let t = Tensor::matrix(indices.len(), d, out)?;
        Ok(self.push(
            Op::EmbedColumns {
                table,
                indices: indices.to_vec(),
            },
            t,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every trainable leaf reachable from
    /// `loss`. Leaf gradients are added to, never overwritten.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.needs_grad(Var(i)) {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.needs_grad(v) {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatVec(a, x) => {
                let (av, xv) = (self.value(*a), self.value(*x));
                let (m, n) = (av.rows(), av.cols());
                send(*a, &|da| {
                    for r in 0..m {
                        let gr = g[r];
                        for (d, &xj) in da[r * n..(r + 1) * n].iter_mut().zip(xv.data()) {
                            *d += gr * xj;
                        }
                    }
                });
                send(*x, &|dx| {
                    for r in 0..m {
                        let gr = g[r];
                        for (d, &aj) in dx.iter_mut().zip(&av.data()[r * n..(r + 1) * n]) {
                            *d += gr * aj;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                send(*a, &|da| {
                    // dA = G B^T
                    let bt = transpose_raw(bv.data(), k, n);
                    let prod = matmul_raw(g, &bt, m, n, k);
                    add_into(da, &prod);
                });
                send(*b, &|db| {
                    // dB = A^T G
                    let at = transpose_raw(av.data(), m, k);
                    let prod = matmul_raw(&at, g, k, m, n);
                    add_into(db, &prod);
                });
            }
            Op::Transpose(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                // g is [c, r]
                send(*x, &|dx| add_into(dx, &transpose_raw(g, c, r)));
            }
            Op::Add(a, b) => {
                send(*a, &|d| add_into(d, g));
                send(*b, &|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                send(*a, &|d| add_into(d, g));
                send(*b, &|d| d.iter_mut().zip(g).for_each(|(p, q)| *p -= q));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                send(*b, &|d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(x, s) => send(*x, &|d| d.iter_mut().zip(g).for_each(|(p, q)| *p += q * s)),
            Op::Tanh(x) => send(*x, &|d| {
                for k in 0..d.len() {
                    d[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::Sigmoid(x) => send(*x, &|d| {
                for k in 0..d.len() {
                    d[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                send(*x, &|d| {
                    for k in 0..d.len() {
                        if xv[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let inner: f64 = out.iter().zip(g).map(|(y, gy)| y * gy).sum();
                send(*x, &|d| {
                    for k in 0..d.len() {
                        d[k] += out[k] * (g[k] - inner);
                    }
                })
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    let part = &g[offset..offset + n];
                    send(x, &|d| add_into(d, part));
                    offset += n;
                }
            }
            Op::Reshape(x) => send(*x, &|d| add_into(d, g)),
            Op::Slice { x, start } => {
                let start = *start;
                send(*x, &|d| add_into(&mut d[start..start + g.len()], g))
            }
            Op::Sum(x) => send(*x, &|d| d.iter_mut().for_each(|p| *p += g[0])),
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|d| d.iter_mut().zip(bv).for_each(|(p, q)| *p += g[0] * q));
                send(*b, &|d| d.iter_mut().zip(av).for_each(|(p, q)| *p += g[0] * q));
            }
            Op::MeanAxis { x, axis } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let axis = *axis;
                send(*x, &|d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += if axis == 0 { g[j] / r as f64 } else { g[i] / c as f64 };
                        }
                    }
                })
            }
            Op::MaxAxis { x, argmax } | Op::MaxPool1d { x, argmax } => send(*x, &|d| {
                for (k, &src) in argmax.iter().enumerate() {
                    d[src] += g[k];
                }
            }),
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padded_len,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (c_out, c_in, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let len = xv.len() / c_in;
                let out_len = (padded_len - k) / stride + 1;
                let stride = *stride;
                send(*b, &|db| {
                    for o in 0..c_out {
                        db[o] += g[o * out_len..(o + 1) * out_len].iter().sum::<f64>();
                    }
                });
                send(*w, &|dw| {
                    for o in 0..c_out {
                        for c in 0..c_in {
                            let xs = &xv.data()[c * len..(c + 1) * len];
                            for j in 0..k {
                                let mut acc = 0.0;
                                for t in 0..out_len {
                                    let p = t * stride + j;
                                    if p < len {
                                        acc += g[o * out_len + t] * xs[p];
                                    }
                                }
                                dw[(o * c_in + c) * k + j] += acc;
                            }
                        }
                    }
                });
                send(*x, &|dx| {
                    for o in 0..c_out {
                        for c in 0..c_in {
                            let ws = &wv.data()[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                            for t in 0..out_len {
                                let gt = g[o * out_len + t];
                                for (j, &wj) in ws.iter().enumerate() {
                                    let p = t * stride + j;
                                    if p < len {
                                        dx[c * len + p] += gt * wj;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::EmbedColumns { table, indices } => {
                let vocab = self.value(*table).cols();
                let d = self.value(*table).rows();
                send(*table, &|dt| {
                    for (r, &idx) in indices.iter().enumerate() {
                        for k in 0..d {
                            dt[k * vocab + idx] += g[r * d + k];
                        }
                    }
                })
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                send(*x, &|d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / xv[k];
                    }
                })
            }
            Op::Exp(x) => send(*x, &|d| {
                for k in 0..d.len() {
                    d[k] += g[k] * out[k];
                }
            }),
            Op::ClampMin { x, min } => {
                let xv = self.value(*x).data();
                send(*x, &|d| {
                    for k in 0..d.len() {
                        if xv[k] >= *min {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::ScaleRows(m, v) => {
                let (mv, vv) = (self.value(*m), self.value(*v));
                let c = mv.cols();
                send(*m, &|d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vv.data()[k / c];
                    }
                });
                send(*v, &|d| {
                    for k in 0..mv.len() {
                        d[k / c] += g[k] * mv.data()[k];
                    }
                });
            }
            Op::ScaleCols(m, v) => {
                let (mv, vv) = (self.value(*m), self.value(*v));
                let c = mv.cols();
                send(*m, &|d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vv.data()[k % c];
                    }
                });
                send(*v, &|d| {
                    for k in 0..mv.len() {
                        d[k % c] += g[k] * mv.data()[k];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_raw(x: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>, AutodiffError> {
    let on = |k: usize| mask.is_none_or(|m| m[k]);
    let max = (0..x.len())
        .filter(|&k| on(k))
        .map(|k| x[k])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(AutodiffError::AllMasked);
    }
    let mut out: Vec<f64> = (0..x.len())
        .map(|k| if on(k) { (x[k] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
