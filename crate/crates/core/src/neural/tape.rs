//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. Nodes only reference earlier nodes, so the tape is a
//! topological order by construction and [`Tape::backward`] is a single
//! reverse sweep. Ops that produce a non-finite value fail immediately.

use super::tensor::{Scalar, Tensor};
use super::NeuralError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

/// Batch statistics observed by a train-mode batchnorm: per-column mean and
/// unbiased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Running statistics and hyperparameters of one batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(dim: usize) -> Self {
        Self { running_mean: vec![T::zero(); dim], running_var: vec![T::one(); dim], momentum: 0.1, eps: 1e-5 }
    }

    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = T::of(self.momentum);
        let keep = T::one() - m;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * *b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.to_f64().unwrap())).collect();
        BatchNormState { running_mean: c(&self.running_mean), running_var: c(&self.running_var), momentum: self.momentum, eps: self.eps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Tanh(Var),
    Transpose(Var),
    Scale(Var, T),
    /// `x - c` for a constant `c`; the gradient passes straight through.
    SubConst(Var),
    GatherRows(Var, Vec<u32>),
    ConcatCols(Vec<Var>),
    ScatterMean { src: Var, targets: Vec<u32>, inv_counts: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T>, batch: bool },
    SegmentMax { x: Var, argmax: Vec<u32> },
    L2NormRows { x: Var, inv_norms: Vec<T> },
    SumSquares(Var),
    RowSums(Var),
    WeightedSum(Vec<(Var, T)>),
    NegLogSoftmaxFirst { x: Var, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients from one backward sweep.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for each parameter slot in `0..count`, zero-filled where a
    /// parameter did not influence the loss. `shapes` gives the fallback shape.
    pub fn param_grads(&self, shapes: &[(usize, usize)]) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        for &(param, node) in &self.params {
            if let Some(g) = &self.by_node[node] {
                out[param].add_assign(g);
            }
        }
        out
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(), NeuralError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(NeuralError::NonFinite(op))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var, NeuralError> {
        check(&value, name)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) => self.ng(*a) || self.ng(*b),
            Op::Relu(x)
            | Op::Tanh(x)
            | Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::SubConst(x)
            | Op::GatherRows(x, _)
            | Op::SumSquares(x)
            | Op::RowSums(x) => self.ng(*x),
            Op::ConcatCols(xs) => xs.iter().any(|x| self.ng(*x)),
            Op::WeightedSum(xs) => xs.iter().any(|(x, _)| self.ng(*x)),
            Op::ScatterMean { src, .. } => self.ng(*src),
            Op::BatchNorm { x, gamma, beta, .. } => self.ng(*x) || self.ng(*gamma) || self.ng(*beta),
            Op::SegmentMax { x, .. } | Op::L2NormRows { x, .. } | Op::NegLogSoftmaxFirst { x, .. } => self.ng(*x),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var, NeuralError> {
        self.push(t, Op::Leaf, "constant")
    }

    /// Trainable leaf bound to parameter slot `index`.
    pub fn param(&mut self, index: usize, t: &Tensor<T>) -> Result<Var, NeuralError> {
        self.push(t.clone(), Op::Param(index), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows, bv.cols);
        av.matmul_into(false, bv, false, &mut out)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// Adds a `1 x m` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NeuralError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows != 1 || bv.cols != xv.cols {
            return Err(NeuralError::ShapeMismatch(format!(
                "bias {}x{} for input {}x{}",
                bv.rows, bv.cols, xv.rows, xv.cols
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += *b;
            }
        }
        self.push(out, Op::AddBias(x, b), "add_bias")
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NeuralError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NeuralError::ShapeMismatch(format!("add {:?} and {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NeuralError> {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NeuralError> {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = v.tanh();
        }
        self.push(out, Op::Tanh(x), "tanh")
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Result<Var, NeuralError> {
        match act {
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NeuralError> {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.cols, xv.rows);
        for r in 0..xv.rows {
            for c in 0..xv.cols {
                out.data[c * xv.rows + r] = xv.data[r * xv.cols + c];
            }
        }
        self.push(out, Op::Transpose(x), "transpose")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, NeuralError> {
        let mut out = self.value(x).clone();
        out.scale(s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    /// `x - c` where `c` is treated as a constant.
    pub fn sub_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var, NeuralError> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(NeuralError::ShapeMismatch(format!("sub_const {:?} and {:?}", xv.shape(), c.shape())));
        }
        let mut out = xv.clone();
        for (o, v) in out.data.iter_mut().zip(&c.data) {
            *o = *o - *v;
        }
        self.push(out, Op::SubConst(x), "sub_const")
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[u32]) -> Result<Var, NeuralError> {
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), xv.cols);
        for (r, &i) in idx.iter().enumerate() {
            if i as usize >= xv.rows {
                return Err(NeuralError::IndexOutOfRange { index: i as usize, len: xv.rows });
            }
            out.row_mut(r).copy_from_slice(xv.row(i as usize));
        }
        self.push(out, Op::GatherRows(x, idx.to_vec()), "gather_rows")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, NeuralError> {
        let rows = self.value(xs[0]).rows;
        if xs.iter().any(|&x| self.value(x).rows != rows) {
            return Err(NeuralError::ShapeMismatch("concat_cols row counts differ".into()));
        }
        let cols: usize = xs.iter().map(|&x| self.value(x).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &x in xs {
                let src = self.value(x).row(r);
                out.data[r * cols + off..r * cols + off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    /// Row `i` of the result is the mean of the message rows whose target is
    /// `i`; rows without messages are zero.
    pub fn mean_aggregate(&mut self, messages: Var, targets: &[u32], n: usize) -> Result<Var, NeuralError> {
        let mv = self.value(messages);
        if targets.len() != mv.rows {
            return Err(NeuralError::ShapeMismatch(format!("{} targets for {} messages", targets.len(), mv.rows)));
        }
        let mut counts = vec![0usize; n];
        for &t in targets {
            let t = t as usize;
            if t >= n {
                return Err(NeuralError::IndexOutOfRange { index: t, len: n });
            }
            counts[t] += 1;
        }
        let inv_counts: Vec<T> = counts
            .iter()
            .map(|&c| if c == 0 { T::zero() } else { T::one() / T::of(c as f64) })
            .collect();
        let mut out = Tensor::zeros(n, mv.cols);
        for (r, &t) in targets.iter().enumerate() {
            let w = inv_counts[t as usize];
            let src = mv.row(r);
            for (o, s) in out.row_mut(t as usize).iter_mut().zip(src) {
                *o += *s * w;
            }
        }
        self.push(out, Op::ScatterMean { src: messages, targets: targets.to_vec(), inv_counts }, "mean_aggregate")
    }

    /// Per-column batch normalization. In train mode the batch statistics are
    /// used and returned so the caller can fold them into running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<T>,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>), NeuralError> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        if self.value(gamma).shape() != (1, d) || self.value(beta).shape() != (1, d) || state.running_mean.len() != d {
            return Err(NeuralError::ShapeMismatch(format!("batchnorm over {d} features")));
        }
        let eps = T::of(state.eps);
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(NeuralError::BatchTooSmall(n));
                }
                let nf = T::of(n as f64);
                let mut mean = vec![T::zero(); d];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                        *m += *v;
                    }
                }
                for m in &mut mean {
                    *m = *m / nf;
                }
                let mut var = vec![T::zero(); d];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        let c = *v - *m;
                        *s += c * c;
                    }
                }
                let unbiased = var.iter().map(|s| *s / T::of((n - 1) as f64)).collect();
                for s in &mut var {
                    *s = *s / nf;
                }
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            Mode::Infer => (state.running_mean.clone(), state.running_var.clone(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(n, d);
        for r in 0..n {
            let (src, dst) = (xv.row(r), &mut xhat.data[r * d..(r + 1) * d]);
            for c in 0..d {
                dst[c] = (src[c] - mean[c]) * inv_std[c];
            }
        }
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = xhat.clone();
        for r in 0..n {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g[c] + b[c];
            }
        }
        let batch = mode == Mode::Train;
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch }, "batchnorm")?;
        Ok((v, stats))
    }

    /// Column-wise maximum within each row segment `[offsets[s], offsets[s+1])`.
    /// Gradient ties go to the first maximal row.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var, NeuralError> {
        let xv = self.value(x);
        let segs = offsets.len().saturating_sub(1);
        if segs == 0 || *offsets.last().unwrap() != xv.rows {
            return Err(NeuralError::ShapeMismatch("segment offsets do not cover the rows".into()));
        }
        let d = xv.cols;
        let mut out = Tensor::zeros(segs, d);
        let mut argmax = vec![0u32; segs * d];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi <= lo {
                return Err(NeuralError::EmptyInput);
            }
            out.row_mut(s).copy_from_slice(xv.row(lo));
            argmax[s * d..(s + 1) * d].iter_mut().for_each(|a| *a = lo as u32);
            for r in lo + 1..hi {
                let row = xv.row(r);
                for c in 0..d {
                    if row[c] > out.data[s * d + c] {
                        out.data[s * d + c] = row[c];
                        argmax[s * d + c] = r as u32;
                    }
                }
            }
        }
        self.push(out, Op::SegmentMax { x, argmax }, "segment_max")
    }

    /// Column-wise maximum over all rows, as a `1 x d` vector.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var, NeuralError> {
        let n = self.value(x).rows;
        if n == 0 {
            return Err(NeuralError::EmptyInput);
        }
        self.segment_max(x, &[0, n])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, NeuralError> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut inv_norms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let n = xv.row(r).iter().map(|v| *v * *v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(NeuralError::ZeroVector);
            }
            let inv = T::one() / n;
            out.row_mut(r).iter_mut().for_each(|v| *v *= inv);
            inv_norms.push(inv);
        }
        self.push(out, Op::L2NormRows { x, inv_norms }, "l2_normalize")
    }

    /// Scalar sum of squares.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var, NeuralError> {
        let s = self.value(x).data.iter().map(|v| *v * *v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x), "sum_squares")
    }

    /// `n x 1` column of row sums.
    pub fn row_sums(&mut self, x: Var) -> Result<Var, NeuralError> {
        let xv = self.value(x);
        let data = (0..xv.rows).map(|r| xv.row(r).iter().copied().sum()).collect();
        let out = Tensor::from_vec(xv.rows, 1, data)?;
        self.push(out, Op::RowSums(x), "row_sums")
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var, NeuralError> {
        let mut s = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(NeuralError::ShapeMismatch("weighted_sum expects scalars".into()));
            }
            s += w * t.data[0];
        }
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), "weighted_sum")
    }

    /// `-log softmax(x)[0]` for a `1 x m` row of logits, computed with the
    /// maximum logit subtracted before exponentiation.
    pub fn neg_log_softmax_first(&mut self, x: Var) -> Result<Var, NeuralError> {
        let xv = self.value(x);
        if xv.rows != 1 || xv.cols == 0 {
            return Err(NeuralError::ShapeMismatch("neg_log_softmax_first expects a 1 x m row".into()));
        }
        let max = xv.data.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = xv.data.iter().map(|v| (*v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        let loss = z.ln() + max - xv.data[0];
        let probs = exps.iter().map(|e| *e / z).collect();
        self.push(Tensor::scalar(loss), Op::NegLogSoftmaxFirst { x, probs }, "neg_log_softmax_first")
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NeuralError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NeuralError::ShapeMismatch(format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut params = Vec::new();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            check(&g, "backward").map_err(|_| NeuralError::NonFiniteGradient(id))?;
            let acc = |target: Var, delta: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| -> Result<(), NeuralError> {
                if target.0 >= id {
                    return Err(NeuralError::GraphCycle(id));
                }
                if !self.nodes[target.0].needs_grad {
                    return Ok(());
                }
                match &mut grads[target.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    params.push((*p, id));
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let mut ga = Tensor::zeros(av.rows, av.cols);
                        g.matmul_into(false, bv, true, &mut ga)?;
                        acc(*a, ga, &mut grads)?;
                    }
                    if self.ng(*b) {
                        let mut gb = Tensor::zeros(bv.rows, bv.cols);
                        av.matmul_into(true, &g, false, &mut gb)?;
                        acc(*b, gb, &mut grads)?;
                    }
                }
                Op::AddBias(x, b) => {
                    if self.ng(*b) {
                        let mut gb = Tensor::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                                *o += *v;
                            }
                        }
                        acc(*b, gb, &mut grads)?;
                    }
                    acc(*x, g, &mut grads)?;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads)?;
                    acc(*b, g, &mut grads)?;
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (o, y) in gx.data.iter_mut().zip(&node.value.data) {
                        if *y <= T::zero() {
                            *o = T::zero();
                        }
                    }
                    acc(*x, gx, &mut grads)?;
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    for (o, y) in gx.data.iter_mut().zip(&node.value.data) {
                        *o *= T::one() - *y * *y;
                    }
                    acc(*x, gx, &mut grads)?;
                }
                Op::Transpose(x) => {
                    let mut gx = Tensor::zeros(g.cols, g.rows);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gx.data[c * g.rows + r] = g.data[r * g.cols + c];
                        }
                    }
                    acc(*x, gx, &mut grads)?;
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    gx.scale(*s);
                    acc(*x, gx, &mut grads)?;
                }
                Op::SubConst(x) => acc(*x, g, &mut grads)?,
                Op::GatherRows(x, idx) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(i as usize).iter_mut().zip(g.row(r)) {
                            *o += *v;
                        }
                    }
                    acc(*x, gx, &mut grads)?;
                }
                Op::ConcatCols(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let cols = self.value(x).cols;
                        if self.ng(x) {
                            let mut gx = Tensor::zeros(g.rows, cols);
                            for r in 0..g.rows {
                                gx.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                            }
                            acc(x, gx, &mut grads)?;
                        }
                        off += cols;
                    }
                }
                Op::ScatterMean { src, targets, inv_counts } => {
                    let sv = self.value(*src);
                    let mut gs = Tensor::zeros(sv.rows, sv.cols);
                    for (r, &t) in targets.iter().enumerate() {
                        let w = inv_counts[t as usize];
                        for (o, v) in gs.row_mut(r).iter_mut().zip(g.row(t as usize)) {
                            *o = *v * w;
                        }
                    }
                    acc(*src, gs, &mut grads)?;
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                    let (n, d) = xhat.shape();
                    let gam = &self.value(*gamma).data;
                    let mut sum_dy = vec![T::zero(); d];
                    let mut sum_dy_xhat = vec![T::zero(); d];
                    for r in 0..n {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        for c in 0..d {
                            sum_dy[c] += gr[c];
                            sum_dy_xhat[c] += gr[c] * xr[c];
                        }
                    }
                    if self.ng(*gamma) {
                        acc(*gamma, Tensor::row_vector(sum_dy_xhat.clone()), &mut grads)?;
                    }
                    if self.ng(*beta) {
                        acc(*beta, Tensor::row_vector(sum_dy.clone()), &mut grads)?;
                    }
                    if self.ng(*x) {
                        let mut gx = Tensor::zeros(n, d);
                        if *batch {
                            let nf = T::of(n as f64);
                            for r in 0..n {
                                let (gr, xr) = (g.row(r), xhat.row(r));
                                let out = &mut gx.data[r * d..(r + 1) * d];
                                for c in 0..d {
                                    // dxhat = dy * gamma, summed terms scale the same way
                                    let k = gam[c] * inv_std[c] / nf;
                                    out[c] = k * (nf * gr[c] - sum_dy[c] - xr[c] * sum_dy_xhat[c]);
                                }
                            }
                        } else {
                            for r in 0..n {
                                let gr = g.row(r);
                                let out = &mut gx.data[r * d..(r + 1) * d];
                                for c in 0..d {
                                    out[c] = gr[c] * gam[c] * inv_std[c];
                                }
                            }
                        }
                        acc(*x, gx, &mut grads)?;
                    }
                }
                Op::SegmentMax { x, argmax } => {
                    let xv = self.value(*x);
                    let d = xv.cols;
                    let mut gx = Tensor::zeros(xv.rows, d);
                    for (k, &r) in argmax.iter().enumerate() {
                        gx.data[r as usize * d + k % d] += g.data[k];
                    }
                    acc(*x, gx, &mut grads)?;
                }
                Op::L2NormRows { x, inv_norms } => {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[c] - yr[c] * dot) * inv_norms[r];
                        }
                    }
                    acc(*x, gx, &mut grads)?;
                }
                Op::SumSquares(x) => {
                    let mut gx = self.value(*x).clone();
                    gx.scale(T::of(2.0) * g.data[0]);
                    acc(*x, gx, &mut grads)?;
                }
                Op::RowSums(x) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        let v = g.data[r];
                        gx.row_mut(r).iter_mut().for_each(|o| *o = v);
                    }
                    acc(*x, gx, &mut grads)?;
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc(v, Tensor::scalar(w * g.data[0]), &mut grads)?;
                    }
                }
                Op::NegLogSoftmaxFirst { x, probs } => {
                    let mut gx = Tensor::row_vector(probs.clone());
                    gx.data[0] = gx.data[0] - T::one();
                    gx.scale(g.data[0]);
                    acc(*x, gx, &mut grads)?;
                }
            }
        }
        Ok(Gradients { by_node: grads, params })
    }
}
