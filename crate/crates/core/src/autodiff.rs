//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! caches its output, and records its inputs by [`NodeId`]. Because inputs
//! always precede the node that consumes them, walking the tape backwards is
//! a valid reverse topological order and [`Graph::backward`] visits each node
//! exactly once.
//!
//! Elementwise binary ops broadcast over trailing axes: the operand whose
//! shape is a suffix of the other's is repeated along the leading axes. A
//! 0-d scalar is a suffix of every shape.
//!
//! All reductions run left to right in index order, so forward and backward
//! results are bit-for-bit reproducible.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                what: "tensor data",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows when viewed as a 2-D matrix (leading axis).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Copies the rows at `indices` into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::invalid("cannot select rows of a scalar"));
        }
        let width = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::invalid(format!(
                    "row {i} out of range for {} rows",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sqrt(NodeId),
    Reshape(NodeId),
    /// Row-wise softmax probabilities are cached for the backward pass.
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: NodeId,
        probs: Vec<f64>,
    },
    SigmoidBce {
        logits: NodeId,
        targets: NodeId,
    },
    Mse(NodeId, NodeId),
    SumSquares(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Which operand of a broadcasting binary op is repeated.
#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    /// Right operand repeats `n` times.
    Right(usize),
    /// Left operand repeats `n` times.
    Left(usize),
}

fn broadcast_rule(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Broadcast, Vec<usize>)> {
    if a == b {
        return Ok((Broadcast::Same, a.to_vec()));
    }
    let reps = |big: &[usize], small: &[usize]| -> Option<usize> {
        (small.len() <= big.len() && big[big.len() - small.len()..] == *small)
            .then(|| big[..big.len() - small.len()].iter().product())
    };
    if let Some(n) = reps(a, b) {
        return Ok((Broadcast::Right(n), a.to_vec()));
    }
    if let Some(n) = reps(b, a) {
        return Ok((Broadcast::Left(n), b.to_vec()));
    }
    Err(Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    })
}

/// Sums `grad` (of the broadcast output) back down to an operand of length
/// `len` that was repeated `reps` times.
fn reduce_broadcast(grad: &[f64], len: usize, reps: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for r in 0..reps {
        for (o, g) in out.iter_mut().zip(&grad[r * len..(r + 1) * len]) {
            *o += g;
        }
    }
    out
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Whether `id` was registered as a trainable leaf.
    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param)
    }

    fn push(&mut self, op: &'static str, kind: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node { op: kind, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant leaf; receives no gradient of interest.
    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        self.push("input", Op::Input, t)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<NodeId> {
        self.push("param", Op::Param, t)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let value = Tensor::new(vec![n, m], matmul_raw(av.data(), bv.data(), n, k, m))?;
        self.push("matmul", Op::MatMul(a, b), value)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        kind: Op,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (rule, shape) = broadcast_rule(name, av.shape(), bv.shape())?;
        let data = match rule {
            Broadcast::Same => av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Right(_) => {
                let small = bv.data();
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, small[i % small.len()]))
                    .collect()
            }
            Broadcast::Left(_) => {
                let small = av.data();
                bv.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(small[i % small.len()], y))
                    .collect()
            }
        };
        let value = Tensor::new(shape, data)?;
        self.push(name, kind, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let value = self.value(a).map(|x| x * c);
        self.push("scale", Op::Scale(a, c), value)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", Op::Relu(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(f64::tanh);
        self.push("tanh", Op::Tanh(a), value)
    }

    /// Elementwise square root. The derivative at exactly zero is taken as 0,
    /// which makes `sqrt(sum_squares(d))` use the zero subgradient at `d = 0`.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(f64::sqrt);
        self.push("sqrt", Op::Sqrt(a), value)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let src = self.value(a);
        let value = Tensor::new(shape.to_vec(), src.data().to_vec()).map_err(|_| Error::ShapeMismatch {
            op: "reshape",
            left: src.shape().to_vec(),
            right: shape.to_vec(),
        })?;
        self.push("reshape", Op::Reshape(a), value)
    }

    /// Mean over rows of `-sum(target * log softmax(logits))`. A 1-D input is
    /// treated as a single row. Targets must be one-hot rows.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (lv, tv) = (self.value(logits), self.value(targets));
        if lv.shape() != tv.shape() || lv.shape().is_empty() || lv.shape().len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: lv.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let classes = *lv.shape().last().expect("non-empty shape");
        let rows = lv.len() / classes;
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0;
        for r in 0..rows {
            let row = &lv.data()[r * classes..(r + 1) * classes];
            let target = &tv.data()[r * classes..(r + 1) * classes];
            let mut hot = None;
            for (j, &t) in target.iter().enumerate() {
                if t == 1.0 && hot.is_none() {
                    hot = Some(j);
                } else if t != 0.0 {
                    return Err(Error::invalid(format!(
                        "softmax_cross_entropy: target row {r} is not one-hot"
                    )));
                }
            }
            let hot =
                hot.ok_or_else(|| Error::invalid(format!("softmax_cross_entropy: target row {r} is not one-hot")))?;
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &x in row {
                z += (x - max).exp();
            }
            let log_z = z.ln() + max;
            for &x in row {
                probs.push((x - log_z).exp());
            }
            total += log_z - row[hot];
        }
        let value = Tensor::scalar(total / rows as f64);
        self.push(
            "softmax_cross_entropy",
            Op::SoftmaxCrossEntropy { logits, targets, probs },
            value,
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (lv, tv) = (self.value(logits), self.value(targets));
        if lv.shape() != tv.shape() {
            return Err(Error::ShapeMismatch {
                op: "sigmoid_bce",
                left: lv.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let mut total = 0.0;
        for (&x, &t) in lv.data().iter().zip(tv.data()) {
            if t != 0.0 && t != 1.0 {
                return Err(Error::invalid("sigmoid_bce: targets must be 0 or 1"));
            }
            total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(total / lv.len() as f64);
        self.push("sigmoid_bce", Op::SigmoidBce { logits, targets }, value)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                left: pv.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let mut total = 0.0;
        for (&p, &t) in pv.data().iter().zip(tv.data()) {
            total += (p - t) * (p - t);
        }
        let value = Tensor::scalar(total / pv.len() as f64);
        self.push("mse", Op::Mse(pred, target), value)
    }

    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let mut total = 0.0;
        for &x in self.value(a).data() {
            total += x * x;
        }
        self.push("sum_squares", Op::SumSquares(a), Tensor::scalar(total))
    }

    /// Reverse pass from a scalar `root`. Gradients of nodes that do not
    /// influence `root` are zero.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g[i * m + j] * bv.data()[p * m + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            for j in 0..m {
                                db[p * m + j] += a_ip * g[i * m + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (la, lb) = (self.value(*a).len(), self.value(*b).len());
                    let (ga, gb) = match broadcast_rule("add", self.value(*a).shape(), self.value(*b).shape())?.0 {
                        Broadcast::Same => (g.clone(), g.clone()),
                        Broadcast::Right(reps) => (g.clone(), reduce_broadcast(&g, lb, reps)),
                        Broadcast::Left(reps) => (reduce_broadcast(&g, la, reps), g.clone()),
                    };
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb.into_iter().map(|v| sign * v).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (la, lb) = (av.len(), bv.len());
                    let rule = broadcast_rule("mul", av.shape(), bv.shape())?.0;
                    // Products against the broadcast partner, then reduce.
                    let full_a: Vec<f64> = (0..g.len()).map(|i| g[i] * bv.data()[i % lb]).collect();
                    let full_b: Vec<f64> = (0..g.len()).map(|i| g[i] * av.data()[i % la]).collect();
                    let (ga, gb) = match rule {
                        Broadcast::Same => (full_a, full_b),
                        Broadcast::Right(reps) => (full_a, reduce_broadcast(&full_b, lb, reps)),
                        Broadcast::Left(reps) => (reduce_broadcast(&full_a, la, reps), full_b),
                    };
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * c).collect());
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = g.iter().zip(y).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let y = node.value.data();
                    let ga = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| if yv > 0.0 { gv / (2.0 * yv) } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g.clone()),
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let t = self.value(*targets).data();
                    let classes = *self.value(*logits).shape().last().expect("shape");
                    let rows = (t.len() / classes) as f64;
                    let ga = probs.iter().zip(t).map(|(&p, &tv)| g[0] * (p - tv) / rows).collect();
                    accumulate(&mut grads, *logits, ga);
                }
                Op::SigmoidBce { logits, targets } => {
                    let x = self.value(*logits).data();
                    let t = self.value(*targets).data();
                    let n = x.len() as f64;
                    let ga = x
                        .iter()
                        .zip(t)
                        .map(|(&xv, &tv)| g[0] * (sigmoid(xv) - tv) / n)
                        .collect();
                    accumulate(&mut grads, *logits, ga);
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                    let n = pv.len() as f64;
                    let gp: Vec<f64> = pv.iter().zip(tv).map(|(&a, &b)| g[0] * 2.0 * (a - b) / n).collect();
                    let gt = gp.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *p, gp);
                    accumulate(&mut grads, *t, gt);
                }
                Op::SumSquares(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads, *a, x.iter().map(|&v| g[0] * 2.0 * v).collect());
                }
            }
            grads[id] = Some(g);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            out.push(Tensor {
                shape: node.value.shape.clone(),
                data,
            });
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients of every node with respect to the backward root.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g
            .input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let b = g.input(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn mse_identity_is_zero() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let b = g.input(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.value(l).item(), Some(0.0));
    }

    #[test]
    fn softmax_ce_two_equal_logits() {
        let mut g = Graph::new();
        let l = g.param(Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        let t = g.input(Tensor::vector(vec![1.0, 0.0]).unwrap()).unwrap();
        let loss = g.softmax_cross_entropy(l, t).unwrap();
        assert!(close(g.value(loss).item().unwrap(), std::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_target() {
        let logits = vec![0.3, -1.2, 2.0, 0.1];
        let mut g = Graph::new();
        let l = g.param(Tensor::vector(logits.clone()).unwrap()).unwrap();
        let t = g.input(Tensor::vector(vec![0.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let loss = g.softmax_cross_entropy(l, t).unwrap();
        let grads = g.backward(loss).unwrap();
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        for (i, &x) in logits.iter().enumerate() {
            let expected = x.exp() / z - if i == 2 { 1.0 } else { 0.0 };
            assert!(close(grads.get(l).data()[i], expected, 1e-12));
        }
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), Some(6.0));
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let unused = g.param(Tensor::vector(vec![5.0, 6.0, 7.0]).unwrap()).unwrap();
        let y = g.sum_squares(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let b = g.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = g.input(Tensor::vector(vec![0.0; 2]).unwrap()).unwrap();
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut g = Graph::new();
        let t = Tensor::vector(vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(g.input(t.clone()), Err(Error::NonFinite { .. })));
        assert!(matches!(g.param(t), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn bias_broadcast_gradient_sums_rows() {
        let mut g = Graph::new();
        let x = g
            .input(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let b = g.param(Tensor::vector(vec![0.5, -0.5]).unwrap()).unwrap();
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 1.5, 3.5, 3.5, 5.5, 5.5]);
        let s = g.sum_squares(y).unwrap();
        let grads = g.backward(s).unwrap();
        // d/db sum (x + b)^2 = 2 * column sums of (x + b)
        assert_eq!(grads.get(b).data(), &[2.0 * 10.5, 2.0 * 10.5]);
    }

    #[test]
    fn sqrt_subgradient_at_zero() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        let c = g.input(Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        let d = g.sub(w, c).unwrap();
        let s = g.sum_squares(d).unwrap();
        let n = g.sqrt(s).unwrap();
        let grads = g.backward(n).unwrap();
        assert_eq!(grads.get(w).data(), &[0.0, 0.0]);
    }
}
