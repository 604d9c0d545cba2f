use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive that produced a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    /// `diag(v) · W` or `W · diag(v)`, or a scalar times a tensor.
    BroadcastMul,
    Gelu,
    Softmax,
    LayerNorm,
    MeanSquaredError,
    KlDivergence,
    CrossEntropy,
    Sigmoid,
    Log,
    Clamp,
    ScalarAffine,
    Sum,
    Transpose,
    Slice,
    Concat,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        support: Option<Vec<usize>>,
        stats: Vec<(f64, f64)>,
    },
    Mse(Var, Var),
    KlDiv {
        student: Var,
        teacher: Var,
        temperature: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Sigmoid(Var),
    Log(Var),
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Affine {
        x: Var,
        scale: f32,
    },
    Sum(Var),
    Transpose(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

impl Op {
    fn kind(&self) -> PrimitiveKind {
        use PrimitiveKind as K;
        match self {
            Op::Leaf => K::Leaf,
            Op::MatMul(..) => K::MatMul,
            Op::Add(..) => K::Add,
            Op::Sub(..) => K::Sub,
            Op::Mul(..) => K::Mul,
            Op::ScaleBy(..) | Op::ScaleRows(..) | Op::ScaleCols(..) => K::BroadcastMul,
            Op::Gelu(_) => K::Gelu,
            Op::Softmax(_) => K::Softmax,
            Op::LayerNorm { .. } => K::LayerNorm,
            Op::Mse(..) => K::MeanSquaredError,
            Op::KlDiv { .. } => K::KlDivergence,
            Op::CrossEntropy { .. } => K::CrossEntropy,
            Op::Sigmoid(_) => K::Sigmoid,
            Op::Log(_) => K::Log,
            Op::Clamp { .. } => K::Clamp,
            Op::Affine { .. } => K::ScalarAffine,
            Op::Sum(_) => K::Sum,
            Op::Transpose(_) => K::Transpose,
            Op::SliceRows { .. } | Op::SliceCols { .. } | Op::GatherRows { .. } => K::Slice,
            Op::ConcatRows(_) | Op::ConcatCols(_) => K::Concat,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A gradient tape. Nodes are appended in evaluation order, so every node's
/// inputs have smaller indices and the graph is acyclic by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires grad.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like `like` when no gradient reached it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> PrimitiveKind {
        self.nodes[v.0].op.kind()
    }

    /// Direct inputs of `v` under the recorded provenance.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::ScaleRows(a, b)
            | Op::ScaleCols(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::KlDiv {
                student, teacher, ..
            } => vec![*student, *teacher],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Sigmoid(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Transpose(x) => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Clamp { x, .. }
            | Op::Affine { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. } => vec![*x],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` only if some input requires grad; otherwise the result is a
    /// plain constant.
    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if rg {
            self.push(value, op, true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.rows_cols();
        let (k2, n) = bv.rows_cols();
        if k != k2 || av.shape().len() > 2 || bv.shape().len() > 2 {
            return Err(shape_err("matmul", av, bv));
        }
        let out = Tensor::matrix(m, n, tensor::matmul(av.data(), bv.data(), m, k, n))?;
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.record(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    /// `s · x` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(shape_err("scale_by", self.value(x), sv));
        }
        let k = sv.item();
        let out = self.value(x).map(|v| v * k);
        Ok(self.record(out, Op::ScaleBy(x, s), &[x, s]))
    }

    /// `diag(v) · W`: row `i` of `w` scaled by `v[i]`.
    pub fn scale_rows(&mut self, w: Var, v: Var) -> Result<Var> {
        let (wv, vv) = (self.value(w), self.value(v));
        let (r, c) = wv.rows_cols();
        if vv.numel() != r || wv.shape().len() > 2 {
            return Err(shape_err("scale_rows", wv, vv));
        }
        let mut out = wv.clone();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let k = vv.data()[i];
            row.iter_mut().for_each(|x| *x *= k);
        }
        Ok(self.record(out, Op::ScaleRows(w, v), &[w, v]))
    }

    /// `W · diag(v)`: column `j` of `w` scaled by `v[j]`.
    pub fn scale_cols(&mut self, w: Var, v: Var) -> Result<Var> {
        let (wv, vv) = (self.value(w), self.value(v));
        let c = wv.cols();
        if vv.numel() != c || wv.shape().len() > 2 {
            return Err(shape_err("scale_cols", wv, vv));
        }
        let mut out = wv.clone();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(vv.data()).for_each(|(x, &k)| *x *= k);
        }
        Ok(self.record(out, Op::ScaleCols(w, v), &[w, v]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::gelu);
        self.record(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::sigmoid);
        self.record(out, Op::Sigmoid(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| (v as f64).ln() as f32);
        self.record(out, Op::Log(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.record(out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let out = self
            .value(x)
            .map(|v| (scale as f64 * v as f64 + shift as f64) as f32);
        self.record(out, Op::Affine { x, scale }, &[x])
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            tensor::softmax_rows(xv.data(), xv.cols()),
        )
        .expect("same shape");
        self.record(out, Op::Softmax(x), &[x])
    }

    /// Row-wise layer norm. With `support`, statistics use only those columns and
    /// every other output column is zero.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        support: Option<Vec<usize>>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let cols = xv.cols();
        if gv.numel() != cols || bv.numel() != cols {
            return Err(shape_err("layer_norm", xv, gv));
        }
        if let Some(s) = &support {
            if s.iter().any(|&k| k >= cols) {
                return Err(Error::InvalidArgument(
                    "layer_norm: support index out of range".into(),
                ));
            }
        }
        let mut out = Tensor::zeros(xv.shape());
        let mut stats = Vec::with_capacity(xv.rows());
        let all: Vec<usize>;
        let cols_used: &[usize] = match &support {
            Some(s) => s,
            None => {
                all = (0..cols).collect();
                &all
            }
        };
        for (r, orow) in out.data_mut().chunks_mut(cols).enumerate() {
            let xrow = xv.row(r);
            let (mean, rstd) = tensor::layer_norm_stats(xrow, support.as_deref());
            stats.push((mean, rstd));
            for &k in cols_used {
                let xhat = (xrow[k] as f64 - mean) * rstd;
                orow[k] = (xhat * gv.data()[k] as f64 + bv.data()[k] as f64) as f32;
            }
        }
        Ok(self.record(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                support,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.numel().max(1) as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum();
        Ok(self.record(Tensor::scalar((s / n) as f32), Op::Mse(a, b), &[a, b]))
    }

    /// `T² · mean_rows KL(p_s ‖ p_t)` with `p = softmax(logits / T)`.
    pub fn kl_div(&mut self, student: Var, teacher: Var, temperature: f32) -> Result<Var> {
        self.same_shape("kl_div", student, teacher)?;
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kl_div: temperature must be positive, got {temperature}"
            )));
        }
        let t = temperature as f64;
        let (sv, tv) = (self.value(student), self.value(teacher));
        let cols = sv.cols();
        let rows = sv.rows();
        let mut total = 0.0f64;
        for r in 0..rows {
            let (lp, lq) = softened_log_probs(sv.row(r), tv.row(r), t);
            total += lp
                .iter()
                .zip(&lq)
                .map(|(&a, &b)| a.exp() * (a - b))
                .sum::<f64>();
        }
        debug_assert!(cols > 0);
        let value = (total / rows.max(1) as f64 * t * t) as f32;
        Ok(self.record(
            Tensor::scalar(value),
            Op::KlDiv {
                student,
                teacher,
                temperature: t,
            },
            &[student, teacher],
        ))
    }

    /// Mean negative log-likelihood of integer `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = lv.rows_cols();
        if labels.len() != rows || labels.iter().any(|&y| y >= cols) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: {} labels for {rows}x{cols} logits",
                labels.len()
            )));
        }
        let mut total = 0.0f64;
        for (r, &y) in labels.iter().enumerate() {
            total -= tensor::log_softmax_row(lv.row(r))[y];
        }
        let value = Tensor::scalar((total / rows.max(1) as f64) as f32);
        Ok(self.record(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.record(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() > 2 {
            return Err(Error::InvalidArgument("transpose: expected a matrix".into()));
        }
        let out = xv.transpose();
        Ok(self.record(out, Op::Transpose(x), &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.rows_cols();
        if start + len > r {
            return Err(Error::InvalidArgument(format!(
                "slice_rows: {start}..{} out of {r} rows",
                start + len
            )));
        }
        let out = Tensor::matrix(len, c, xv.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.record(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.rows_cols();
        if start + len > c {
            return Err(Error::InvalidArgument(format!(
                "slice_cols: {start}..{} out of {c} cols",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        Ok(self.record(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Rows `indices` of `x` (repeats allowed); embedding lookup.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of {r} rows"
            )));
        }
        let out = xv.select_rows(indices);
        Ok(self.record(
            out,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let xv = self.value(x);
            if xv.cols() != c {
                return Err(shape_err("concat_rows", self.value(xs[0]), xv));
            }
            rows += xv.rows();
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        Ok(self.record(out, Op::ConcatRows(xs.to_vec()), xs))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = self.value(xs[0]).rows();
        for &x in xs {
            let xv = self.value(x);
            if xv.rows() != r {
                return Err(shape_err("concat_cols", self.value(xs[0]), xv));
            }
        }
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        Ok(self.record(out, Op::ConcatCols(xs.to_vec()), xs))
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(delta)
                .for_each(|(a, b)| *a += b),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.rows_cols();
                let n = bv.cols();
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, tensor::matmul_nt(gd, bv.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, tensor::matmul_tn(av.data(), gd, m, k, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, mul(gd, bv.data()));
                self.accumulate(grads, *b, mul(gd, av.data()));
            }
            Op::ScaleBy(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let k = sv.item();
                self.accumulate(grads, *x, gd.iter().map(|v| v * k).collect());
                if self.requires_grad(*s) {
                    let d = tensor::dot(gd, xv.data()) as f32;
                    self.accumulate(grads, *s, vec![d]);
                }
            }
            Op::ScaleRows(w, v) => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let c = wv.cols();
                if self.requires_grad(*w) {
                    let mut dw = gd.to_vec();
                    for (i, row) in dw.chunks_mut(c).enumerate() {
                        let k = vv.data()[i];
                        row.iter_mut().for_each(|x| *x *= k);
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.requires_grad(*v) {
                    let dv = gd
                        .chunks(c)
                        .zip(wv.data().chunks(c))
                        .map(|(gr, wr)| tensor::dot(gr, wr) as f32)
                        .collect();
                    self.accumulate(grads, *v, dv);
                }
            }
            Op::ScaleCols(w, v) => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let c = wv.cols();
                if self.requires_grad(*w) {
                    let mut dw = gd.to_vec();
                    for row in dw.chunks_mut(c) {
                        row.iter_mut().zip(vv.data()).for_each(|(x, &k)| *x *= k);
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.requires_grad(*v) {
                    let mut acc = vec![0.0f64; c];
                    for (gr, wr) in gd.chunks(c).zip(wv.data().chunks(c)) {
                        for j in 0..c {
                            acc[j] += gr[j] as f64 * wr[j] as f64;
                        }
                    }
                    self.accumulate(grads, *v, acc.into_iter().map(|x| x as f32).collect());
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xi, &gi)| gi * tensor::gelu_grad(xi))
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = out
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gi)| (gi as f64 * y as f64 * (1.0 - y as f64)) as f32)
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xi, &gi)| (gi as f64 / xi as f64) as f32)
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xi, &gi)| if xi >= *lo && xi <= *hi { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, gd.iter().map(|v| v * scale).collect());
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut d = vec![0.0f32; gd.len()];
                for ((yr, gr), dr) in out.data().chunks(c).zip(gd.chunks(c)).zip(d.chunks_mut(c)) {
                    let s = tensor::dot(yr, gr);
                    for j in 0..c {
                        dr[j] = (yr[j] as f64 * (gr[j] as f64 - s)) as f32;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                support,
                stats,
            } => self.layer_norm_backward(*x, *gamma, *beta, support.as_deref(), stats, gd, grads),
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() as f64 / av.numel().max(1) as f64;
                let diff: Vec<f32> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| (k * (x as f64 - y as f64)) as f32)
                    .collect();
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, diff.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, diff);
            }
            Op::KlDiv {
                student,
                teacher,
                temperature,
            } => {
                let t = *temperature;
                let (sv, tv) = (self.value(*student), self.value(*teacher));
                let (rows, cols) = sv.rows_cols();
                // d/dz_s = T · p_s (log p_s - log p_t - KL_row) / rows
                // d/dz_t = T · (p_t - p_s) / rows
                let scale = g.item() as f64 * t / rows.max(1) as f64;
                let mut ds = vec![0.0f32; rows * cols];
                let mut dt = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    let (lp, lq) = softened_log_probs(sv.row(r), tv.row(r), t);
                    let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
                    for j in 0..cols {
                        let p = lp[j].exp();
                        ds[r * cols + j] = (scale * p * (lp[j] - lq[j] - kl)) as f32;
                        dt[r * cols + j] = (scale * (lq[j].exp() - p)) as f32;
                    }
                }
                self.accumulate(grads, *student, ds);
                self.accumulate(grads, *teacher, dt);
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (rows, cols) = lv.rows_cols();
                let scale = g.item() as f64 / rows.max(1) as f64;
                let mut d = vec![0.0f32; rows * cols];
                for (r, &y) in labels.iter().enumerate() {
                    let lp = tensor::log_softmax_row(lv.row(r));
                    for j in 0..cols {
                        let ind = if j == y { 1.0 } else { 0.0 };
                        d[r * cols + j] = (scale * (lp[j].exp() - ind)) as f32;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g.item(); n]);
            }
            Op::Transpose(x) => {
                let gt = Tensor::new(out.shape().to_vec(), gd.to_vec())
                    .expect("shape")
                    .transpose();
                self.accumulate(grads, *x, gt.into_data());
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0f32; xv.numel()];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, d);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = xv.rows_cols();
                let len = out.cols();
                let mut d = vec![0.0f32; xv.numel()];
                for i in 0..r {
                    d[i * c + start..i * c + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::GatherRows { x, indices } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0f32; xv.numel()];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += gd[k * c + j];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    self.accumulate(grads, x, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(xs) => {
                let total = out.cols();
                let mut offset = 0;
                for &x in xs {
                    let (r, c) = self.value(x).rows_cols();
                    if self.requires_grad(x) {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(grads, x, d);
                    }
                    offset += c;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        support: Option<&[usize]>,
        stats: &[(f64, f64)],
        gd: &[f32],
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let cols = xv.cols();
        let all: Vec<usize>;
        let used: &[usize] = match support {
            Some(s) => s,
            None => {
                all = (0..cols).collect();
                &all
            }
        };
        let n = used.len() as f64;
        let mut dx = vec![0.0f32; xv.numel()];
        let mut dgamma = vec![0.0f64; cols];
        let mut dbeta = vec![0.0f64; cols];
        for (r, &(mean, rstd)) in stats.iter().enumerate() {
            if used.is_empty() {
                break;
            }
            let xrow = xv.row(r);
            let grow = &gd[r * cols..(r + 1) * cols];
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for &k in used {
                let xhat = (xrow[k] as f64 - mean) * rstd;
                let dxhat = grow[k] as f64 * gv.data()[k] as f64;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dgamma[k] += grow[k] as f64 * xhat;
                dbeta[k] += grow[k] as f64;
            }
            for &k in used {
                let xhat = (xrow[k] as f64 - mean) * rstd;
                let dxhat = grow[k] as f64 * gv.data()[k] as f64;
                dx[r * cols + k] =
                    (rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n)) as f32;
            }
        }
        self.accumulate(grads, x, dx);
        self.accumulate(grads, gamma, dgamma.into_iter().map(|v| v as f32).collect());
        self.accumulate(grads, beta, dbeta.into_iter().map(|v| v as f32).collect());
    }
}

fn mul(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn softened_log_probs(student: &[f32], teacher: &[f32], t: f64) -> (Vec<f64>, Vec<f64>) {
    let s: Vec<f32> = student.iter().map(|&v| (v as f64 / t) as f32).collect();
    let q: Vec<f32> = teacher.iter().map(|&v| (v as f64 / t) as f32).collect();
    (tensor::log_softmax_row(&s), tensor::log_softmax_row(&q))
}
