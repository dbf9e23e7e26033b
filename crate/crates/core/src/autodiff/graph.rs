use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::tensor::{matmul_a_bt_into, matmul_at_b_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the right operand of a binary op is expanded to the left operand's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[n]` or `[1, n]` repeated over the rows of an `[m, n]` operand.
    Row,
    /// `[m, 1]` repeated over the columns.
    Col,
    Scalar,
}

type VjpFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    Offset(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    ClampMin(usize, f64),
    MulConst(usize, Rc<Tensor>),
    Sum(usize),
    SumCols(usize),
    SumRows(usize),
    Gather(usize, Rc<[usize]>),
    Concat(Vec<usize>),
    Reshape(usize),
    LseGroups(usize, usize),
    Custom(Vec<usize>, VjpFn),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of primitive operations with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and the backward sweep is a single reverse pass.
/// A non-finite result does not abort the forward pass; it poisons the
/// graph and is reported by [`Graph::check_finite`] and [`Graph::backward`].
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    poisoned: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            poisoned: None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Var {
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(name.to_string());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient but is not a registered parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, "param");
        self.params.insert(id, v);
        v
    }

    pub fn check_finite(&self) -> Result<()> {
        match &self.poisoned {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    fn bcast(&self, a: Var, b: Var, op: &'static str) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if sb.is_empty() || (sb.iter().all(|&d| d == 1) && sb.len() <= sa.len()) {
            if self.value(b).len() == 1 {
                return Ok(Bcast::Scalar);
            }
        }
        if sa.len() == 2 {
            let n = sa[1];
            if sb == [n] || sb == [1, n] {
                return Ok(Bcast::Row);
            }
            if sb == [sa[0], 1] {
                return Ok(Bcast::Col);
            }
        }
        Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
    }

    fn expand(&self, b: &Tensor, shape: &[usize], mode: Bcast) -> Vec<f64> {
        let n = shape.iter().product::<usize>();
        match mode {
            Bcast::Same => b.data().to_vec(),
            Bcast::Scalar => vec![b.item(); n],
            Bcast::Row => {
                let cols = b.len();
                (0..n).map(|i| b.data()[i % cols]).collect()
            }
            Bcast::Col => {
                let cols = shape[1];
                (0..n).map(|i| b.data()[i / cols]).collect()
            }
        }
    }

    fn reduce_to(g: &[f64], target: &Tensor, a_shape: &[usize], mode: Bcast) -> Tensor {
        match mode {
            Bcast::Same => Tensor::new(target.shape().to_vec(), g.to_vec()).unwrap(),
            Bcast::Scalar => Tensor::new(target.shape().to_vec(), vec![g.iter().sum()]).unwrap(),
            Bcast::Row => {
                let cols = target.len();
                let mut out = vec![0.0; cols];
                for (i, v) in g.iter().enumerate() {
                    out[i % cols] += v;
                }
                Tensor::new(target.shape().to_vec(), out).unwrap()
            }
            Bcast::Col => {
                let cols = a_shape[1];
                let mut out = vec![0.0; a_shape[0]];
                for (i, v) in g.iter().enumerate() {
                    out[i / cols] += v;
                }
                Tensor::new(target.shape().to_vec(), out).unwrap()
            }
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var> {
        let mode = self.bcast(a, b, name)?;
        let va = self.value(a);
        let eb = self.expand(self.value(b), va.shape(), mode);
        let data: Vec<f64> = va.data().iter().zip(&eb).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, op(a.0, b.0, mode), name))
    }

    /// Elementwise sum; `b` may broadcast over rows, columns, or as a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0), "matmul"))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(a))));
        }
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a.0), "transpose"))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, "scale", |x| c * x, Op::Scale(a.0, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, "offset", |x| x + c, Op::Offset(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, "softplus", softplus, Op::Softplus(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, "exp", f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, "log", f64::ln, Op::Log(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, "square", |x| x * x, Op::Square(a.0))
    }

    /// `max(a, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, "clamp_min", |x| x.max(lo), Op::ClampMin(a.0, lo))
    }

    /// `log σ(a)`, computed as `-softplus(-a)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        let sp = self.softplus(n);
        self.neg(sp)
    }

    /// `log(2 cosh a)`, computed as `a + softplus(-2a)`.
    pub fn log_2cosh(&mut self, a: Var) -> Result<Var> {
        let m2 = self.scale(a, -2.0);
        let sp = self.softplus(m2);
        self.add(a, sp)
    }

    /// Elementwise product with a constant tensor of the same shape (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if c.shape() != self.shape(a) {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", self.shape(a), c.shape()),
            ));
        }
        let data = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(a.0, Rc::new(c)), "mul_const"))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum of an `[m, n]` tensor, giving `[m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::shape("sum_cols", format!("{:?}", v.shape())));
        }
        let (m, n) = (v.rows(), v.cols());
        let data = (0..m).map(|i| v.data()[i * n..(i + 1) * n].iter().sum()).collect();
        let out = Tensor::matrix(m, 1, data)?;
        Ok(self.push(out, Op::SumCols(a.0), "sum_cols"))
    }

    /// Column sums of an `[m, n]` tensor, giving `[1, n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::shape("sum_rows", format!("{:?}", v.shape())));
        }
        let (m, n) = (v.rows(), v.cols());
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (d, x) in data.iter_mut().zip(&v.data()[i * n..(i + 1) * n]) {
                *d += x;
            }
        }
        let out = Tensor::matrix(1, n, data)?;
        Ok(self.push(out, Op::SumRows(a.0), "sum_rows"))
    }

    /// Selects (possibly repeated) columns of an `[m, n]` tensor.
    pub fn gather_cols(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || idx.iter().any(|&j| j >= v.cols()) {
            return Err(Error::shape("gather_cols", format!("{:?}", v.shape())));
        }
        let (m, n) = (v.rows(), v.cols());
        let p = idx.len();
        let mut data = Vec::with_capacity(m * p);
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let out = Tensor::matrix(m, p, data)?;
        Ok(self.push(out, Op::Gather(a.0, idx), "gather_cols"))
    }

    /// Contiguous column range `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Rc<[usize]> = (start..end).collect();
        self.gather_cols(a, idx)
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rank() != 2 || self.value(p).rows() != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| p.0).collect()), "concat_cols"))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a.0), "reshape"))
    }

    /// Log-sum-exp over contiguous groups of `k` columns: `[m, g·k] -> [m, g]`.
    pub fn logsumexp_groups(&mut self, a: Var, k: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || k == 0 || v.cols() % k != 0 {
            return Err(Error::shape("logsumexp_groups", format!("{:?} / {k}", v.shape())));
        }
        let (m, n) = (v.rows(), v.cols());
        let g = n / k;
        let data = v
            .data()
            .chunks(k)
            .map(logsumexp)
            .collect::<Vec<_>>();
        let out = Tensor::matrix(m, g, data)?;
        Ok(self.push(out, Op::LseGroups(a.0, k), "logsumexp_groups"))
    }

    /// Records an operation whose vector-Jacobian product is supplied by the caller.
    ///
    /// `vjp` maps the upstream gradient (shape of `value`) to one gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        vjp: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var {
        let ids = inputs.iter().map(|v| v.0).collect();
        self.push(value, Op::Custom(ids, Box::new(vjp)), "custom")
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], i: usize, g: Vec<f64>) {
            match &mut grads[i] {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = node.value.data();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let (m, k, nn) = (va.rows(), va.cols(), vb.cols());
                    let mut ga = vec![0.0; m * k];
                    matmul_a_bt_into(&g, vb.data(), &mut ga, m, nn, k);
                    let mut gb = vec![0.0; k * nn];
                    matmul_at_b_into(va.data(), &g, &mut gb, m, k, nn);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => {
                    let s = node.value.shape();
                    let gt = Tensor::matrix(s[0], s[1], g).unwrap().transpose();
                    acc(&mut grads, *a, gt.into_data());
                }
                Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let vb = &self.nodes[*b].value;
                    let gs: Vec<f64> = g.iter().map(|v| sign * v).collect();
                    let gb = Self::reduce_to(&gs, vb, node.value.shape(), *mode);
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, gb.into_data());
                }
                Op::Mul(a, b, mode) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let eb = self.expand(vb, va.shape(), *mode);
                    let ga: Vec<f64> = g.iter().zip(&eb).map(|(x, y)| x * y).collect();
                    let gbf: Vec<f64> = g.iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    let gb = Self::reduce_to(&gbf, vb, va.shape(), *mode);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb.into_data());
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.iter().map(|v| c * v).collect()),
                Op::Offset(a) | Op::Reshape(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let ga = g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let x = self.nodes[*a].value.data();
                    let ga = g.iter().zip(x).map(|(gv, &xv)| gv * sigmoid(xv)).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.iter().zip(out).map(|(gv, y)| gv * y).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let x = self.nodes[*a].value.data();
                    let ga = g.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let x = self.nodes[*a].value.data();
                    let ga = g.iter().zip(x).map(|(gv, xv)| 2.0 * gv * xv).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::ClampMin(a, lo) => {
                    let x = self.nodes[*a].value.data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(gv, xv)| if xv >= lo { *gv } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, ga);
                }
                Op::MulConst(a, c) => {
                    let ga = g.iter().zip(c.data()).map(|(gv, cv)| gv * cv).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let len = self.nodes[*a].value.len();
                    acc(&mut grads, *a, vec![g[0]; len]);
                }
                Op::SumCols(a) => {
                    let va = &self.nodes[*a].value;
                    let cols = va.cols();
                    let ga = (0..va.len()).map(|i| g[i / cols]).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let va = &self.nodes[*a].value;
                    let cols = va.cols();
                    let ga = (0..va.len()).map(|i| g[i % cols]).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let va = &self.nodes[*a].value;
                    let (m, nn) = (va.rows(), va.cols());
                    let p = idx.len();
                    let mut ga = vec![0.0; m * nn];
                    for i in 0..m {
                        for (q, &j) in idx.iter().enumerate() {
                            ga[i * nn + j] += g[i * p + q];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let total = node.value.cols();
                    let m = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::LseGroups(a, k) => {
                    let x = self.nodes[*a].value.data();
                    let ga = x
                        .iter()
                        .enumerate()
                        .map(|(i, &xv)| {
                            let gi = i / k;
                            g[gi] * (xv - out[gi]).exp()
                        })
                        .collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Custom(inputs, vjp) => {
                    let up = Tensor::new(node.value.shape().to_vec(), g)?;
                    let gs = vjp(&up);
                    for (&i, gi) in inputs.iter().zip(gs) {
                        if gi.len() != self.nodes[i].value.len() {
                            return Err(Error::shape("custom vjp", "gradient size mismatch"));
                        }
                        acc(&mut grads, i, gi.into_data());
                    }
                }
            }
        }

        let mut leaves = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                let t = Tensor::new(self.nodes[i].value.shape().to_vec(), g)?;
                leaves.insert(i, t);
            }
        }
        let params = self
            .params
            .iter()
            .map(|(&id, v)| {
                let t = leaves
                    .get(&v.0)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (id, t)
            })
            .collect();
        Ok(Gradients { leaves, params })
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf; `None` if the leaf does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// Gradient for parameter `id` (zeros when disconnected); `None` if never registered.
    pub fn param(&self, id: usize) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<usize, Tensor> {
        &self.params
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
