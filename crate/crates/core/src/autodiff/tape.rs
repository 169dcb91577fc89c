//! Record-then-replay reverse-mode differentiation.
//!
//! Every operation appends a node to the tape; node ids are creation order,
//! which is also a valid topological order. `backward` walks the tape once in
//! reverse.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Relu,
    Square,
    Sqrt,
    Scale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    /// Saved: row-wise softmax probabilities and the targets.
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<f64>,
    },
    PairwiseSqDist(Var, Var),
    GroupMean {
        input: Var,
        groups: Vec<Vec<usize>>,
    },
    /// Saved: per-entry derivative of the summed kernel w.r.t. the distance.
    MultiRbf {
        input: Var,
        slope: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when some leaf upstream is trainable.
    tracked: bool,
    /// Accumulated gradient, kept only for trainable leaves.
    grad: Option<Vec<f64>>,
}

/// Append-only computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a tensor as a leaf. It receives a gradient iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push(t.detached(), Op::Leaf, tracked)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a trainable leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Adds the gradient held by leaf `v` into `t`'s gradient buffer.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        if bv.shape()[0] != k {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.len() == 1 {
            let y = bv.item();
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x, y)).collect())?
        } else if av.len() == 1 {
            let x = av.item();
            Tensor::new(bv.shape().to_vec(), bv.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(Error::dim(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        };
        Ok((value, self.tracked(a) || self.tracked(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, t) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, t) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, t) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), t))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = &self.nodes[a.0].value;
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect()).expect("same shape");
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.nodes[a.0].value.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain("log", format!("non-positive input {x}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.nodes[a.0].value.data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
            return Err(Error::domain("sqrt", format!("negative input {x}")));
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    /// Dispatches on [`Elementwise`]. Unary ops ignore `b`.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let rhs = || b.ok_or_else(|| Error::Validation(format!("{op:?} needs two operands")));
        match op {
            Elementwise::Add => self.add(a, rhs()?),
            Elementwise::Sub => self.sub(a, rhs()?),
            Elementwise::Mul => self.mul(a, rhs()?),
            Elementwise::Exp => Ok(self.exp(a)),
            Elementwise::Log => self.log(a),
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::Square => Ok(self.square(a)),
            Elementwise::Sqrt => self.sqrt(a),
            Elementwise::Scale(c) => Ok(self.scale(a, c)),
        }
    }

    /// `x[i, j] + bias[j]` for a matrix `x` and a bias with `cols(x)` entries.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let cols = xv.cols();
        if bv.len() != cols {
            return Err(Error::dim("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let data =
            xv.data().chunks(cols.max(1)).flat_map(|row| row.iter().zip(bv.data()).map(|(a, b)| a + b)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(value, Op::AddBias(x, bias), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), tracked))
    }

    /// Mean over rows of `-sum_c target[c] * log_softmax(logits)[c]`.
    ///
    /// Targets are soft labels: every row must be a probability vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.shape().len() != 2 || targets.shape() != lv.shape() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {:?} vs targets {:?}", lv.shape(), targets.shape()),
            ));
        }
        let (b, c) = (lv.shape()[0], lv.shape()[1]);
        if b == 0 || c == 0 {
            return Err(Error::Empty("softmax_cross_entropy"));
        }
        for r in 0..b {
            let row = targets.row(r);
            let s: f64 = row.iter().sum();
            if row.iter().any(|&t| t < 0.0 || !t.is_finite()) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("target row {r} is not a probability vector (sum {s})")));
            }
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for (j, &x) in row.iter().enumerate() {
                probs[r * c + j] = (x - max).exp() / z;
                let t = targets.row(r)[j];
                if t > 0.0 {
                    loss -= t * (x - lse);
                }
            }
        }
        loss /= b as f64;
        let tracked = self.tracked(logits);
        let op = Op::SoftmaxCrossEntropy { logits, probs, targets: targets.data().to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, tracked))
    }

    /// `out[i, j] = sum_c (a[i, c] - b[j, c])^2`, summed in column order.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(Error::dim("pairwise_sq_dist", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let (m, p) = (av.rows(), bv.rows());
        let mut out = Vec::with_capacity(m * p);
        for i in 0..m {
            let x = av.row(i);
            for j in 0..p {
                out.push(sq_dist(x, bv.row(j)));
            }
        }
        let value = Tensor::matrix(m, p, out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::PairwiseSqDist(a, b), tracked))
    }

    /// `out = sum_h exp(-d / h)` elementwise over a matrix of squared
    /// distances. Columns with `mask[j] == false` are fixed at zero.
    pub fn multi_rbf(&mut self, d2: Var, bandwidths: &[f64], mask: Option<&[bool]>) -> Result<Var> {
        if bandwidths.is_empty() {
            return Err(Error::Empty("multi_rbf bandwidths"));
        }
        if let Some(h) = bandwidths.iter().find(|&&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::domain("multi_rbf", format!("bandwidth {h}")));
        }
        let dv = &self.nodes[d2.0].value;
        let cols = dv.cols();
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::dim("multi_rbf", format!("mask {} vs {} columns", m.len(), cols)));
            }
        }
        let mut out = Vec::with_capacity(dv.len());
        let mut slope = Vec::with_capacity(dv.len());
        for (idx, &d) in dv.data().iter().enumerate() {
            if mask.is_some_and(|m| !m[idx % cols]) {
                out.push(0.0);
                slope.push(0.0);
                continue;
            }
            out.push(rbf_sum(d, bandwidths));
            slope.push(bandwidths.iter().map(|&h| -(-d / h).exp() / h).sum());
        }
        let value = Tensor::new(dv.shape().to_vec(), out)?;
        let tracked = self.tracked(d2);
        Ok(self.push(value, Op::MultiRbf { input: d2, slope }, tracked))
    }

    /// Row `g` of the output is the arithmetic mean of rows `groups[g]` of `x`
    /// (summed in listed order, then divided by the count).
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() != 2 {
            return Err(Error::dim("group_mean", format!("input {:?}", xv.shape())));
        }
        let cols = xv.cols();
        let mut out = Vec::with_capacity(groups.len() * cols);
        for g in groups {
            if g.is_empty() {
                return Err(Error::Empty("group_mean group"));
            }
            if let Some(&bad) = g.iter().find(|&&i| i >= xv.rows()) {
                return Err(Error::dim("group_mean", format!("row {bad} of {}", xv.rows())));
            }
            for c in 0..cols {
                let s: f64 = g.iter().map(|&i| xv.data()[i * cols + c]).sum();
                out.push(s / g.len() as f64);
            }
        }
        let value = Tensor::matrix(groups.len(), cols, out)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::GroupMean { input: x, groups: groups.to_vec() }, tracked))
    }

    /// Reverse sweep from a scalar `loss`. Gradients land on trainable leaves
    /// and accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::dim("backward", format!("loss has shape {:?}", self.nodes[loss.0].value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].tracked {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let n = &mut self.nodes[id];
                match &mut n.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => n.grad = Some(g),
                }
                continue;
            }
            let nodes = &self.nodes;
            let node = &nodes[id];
            let send = |v: Var, delta: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(buf) => buf.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    // dA = G Bᵀ, dB = Aᵀ G
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * bv.data()[p * n + j];
                                db[p * n + j] += av.data()[i * k + p] * gij;
                            }
                        }
                    }
                    let (a, b) = (*a, *b);
                    send(a, da, &mut grads);
                    send(b, db, &mut grads);
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let n = g.len();
                    let at = |i: usize| if av.len() == 1 { av.item() } else { av.data()[i] };
                    let bt = |i: usize| if bv.len() == 1 { bv.item() } else { bv.data()[i] };
                    let (ga, gb): (Vec<f64>, Vec<f64>) = match node.op {
                        Op::Add(..) => (g.clone(), g.clone()),
                        Op::Sub(..) => (g.clone(), g.iter().map(|x| -x).collect()),
                        _ => ((0..n).map(|i| g[i] * bt(i)).collect(), (0..n).map(|i| g[i] * at(i)).collect()),
                    };
                    let reduce =
                        |full: Vec<f64>, len: usize| if len == 1 && n != 1 { vec![full.iter().sum()] } else { full };
                    let (ga, gb) = (reduce(ga, av.len()), reduce(gb, bv.len()));
                    send(a, ga, &mut grads);
                    send(b, gb, &mut grads);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    send(a, g.iter().map(|x| c * x).collect(), &mut grads);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let d = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    send(a, d, &mut grads);
                }
                Op::Log(a) => {
                    let a = *a;
                    let d = g.iter().zip(nodes[a.0].value.data()).map(|(g, x)| g / x).collect();
                    send(a, d, &mut grads);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let d =
                        g.iter().zip(nodes[a.0].value.data()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                    send(a, d, &mut grads);
                }
                Op::Square(a) => {
                    let a = *a;
                    let d = g.iter().zip(nodes[a.0].value.data()).map(|(g, x)| 2.0 * x * g).collect();
                    send(a, d, &mut grads);
                }
                Op::Sqrt(a) => {
                    // d/dx sqrt(x) is unbounded at 0; the subgradient 0 is used there.
                    let a = *a;
                    let d = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, &y)| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
                        .collect();
                    send(a, d, &mut grads);
                }
                Op::AddBias(x, b) => {
                    let (x, b) = (*x, *b);
                    let cols = nodes[b.0].value.len();
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    send(x, g, &mut grads);
                    send(b, gb, &mut grads);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let n = nodes[a.0].value.len();
                    send(a, vec![g[0]; n], &mut grads);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = nodes[a.0].value.len();
                    send(a, vec![g[0] / n as f64; n], &mut grads);
                }
                Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                    let b = nodes[logits.0].value.rows() as f64;
                    let d = probs.iter().zip(targets).map(|(p, t)| g[0] * (p - t) / b).collect();
                    let logits = *logits;
                    send(logits, d, &mut grads);
                }
                Op::PairwiseSqDist(a, b) => {
                    let (a, b) = (*a, *b);
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, p, c) = (av.rows(), bv.rows(), av.cols());
                    let mut da = vec![0.0; m * c];
                    let mut db = vec![0.0; p * c];
                    for i in 0..m {
                        for j in 0..p {
                            let gij = g[i * p + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for q in 0..c {
                                let diff = 2.0 * gij * (av.data()[i * c + q] - bv.data()[j * c + q]);
                                da[i * c + q] += diff;
                                db[j * c + q] -= diff;
                            }
                        }
                    }
                    send(a, da, &mut grads);
                    send(b, db, &mut grads);
                }
                Op::GroupMean { input, groups } => {
                    let input = *input;
                    let xv = &nodes[input.0].value;
                    let cols = xv.cols();
                    let mut d = vec![0.0; xv.len()];
                    for (gi, members) in groups.iter().enumerate() {
                        let n = members.len() as f64;
                        for &i in members {
                            for c in 0..cols {
                                d[i * cols + c] += g[gi * cols + c] / n;
                            }
                        }
                    }
                    send(input, d, &mut grads);
                }
                Op::MultiRbf { input, slope } => {
                    let input = *input;
                    let d = g.iter().zip(slope).map(|(g, s)| g * s).collect();
                    send(input, d, &mut grads);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aip * bv);
        }
    }
    out
}

/// Sequential sum of squared coordinate differences.
pub fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `sum_h exp(-d / h)`.
pub fn rbf_sum(d: f64, bandwidths: &[f64]) -> f64 {
    bandwidths.iter().map(|&h| (-d / h).exp()).sum()
}
