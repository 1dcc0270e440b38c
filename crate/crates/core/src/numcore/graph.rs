//! Record-on-forward tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs, so the node list is already in topological order and the backward
//! sweep simply walks it in reverse.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    DivScalar(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Tanh(Var),
    Relu(Var),
    Sin(Var, f64),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Cols(Var, usize),
    Concat(Vec<Var>),
    Reshape(Var),
    SoftmaxRows(Var),
    CumsumRows(Var),
    Gather(Var, Vec<usize>),
    Select(Vec<bool>, Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Dynamic computation graph. Build it by calling operations, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free-standing leaf whose gradient is reported in [`Gradients`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; `backward_into` accumulates its
    /// gradient into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Parameter value used as a constant (no gradient).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: operand shapes differ"
        );
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<f64> = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).expect("shape"), op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, n) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out).expect("shape"), Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let cols = self.value(a).cols();
        assert_eq!(self.value(row).len(), cols, "add_row: bias length");
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (o, &b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "minimum");
        self.binary(a, b, Op::Min(a, b), f64::min)
    }

    /// Divides every element of `a` by the scalar node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "div_scalar: divisor must be scalar");
        let d = self.value(s).item();
        let value = self.value(a).map(|x| x / d);
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::DivScalar(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `sin(omega * x)`.
    pub fn sin(&mut self, a: Var, omega: f64) -> Var {
        self.unary(a, Op::Sin(a, omega), |x| (omega * x).sin())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Clamp with a zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Row sums: `[n, k] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, k) = (t.rows(), t.cols());
        let data = t.data().chunks(k).map(|r| r.iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(n, 1, data).expect("shape"), Op::SumCols(a), rg)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let (n, k) = (t.rows(), t.cols());
        assert!(start + len <= k && len > 0, "cols: range out of bounds");
        let mut data = Vec::with_capacity(n * len);
        for r in t.data().chunks(k) {
            data.extend_from_slice(&r[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(n, len, data).expect("shape"), Op::Cols(a, start), rg)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.rows(), n, "concat: row counts differ");
            for r in 0..n {
                data[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::matrix(n, total, data).expect("shape"),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshaped(shape).expect("reshape");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let k = t.cols();
        let mut out = t.clone();
        for r in out.data_mut().chunks_mut(k) {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in r.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in r.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Inclusive cumulative sum along each row.
    pub fn cumsum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let k = t.cols();
        let mut out = t.clone();
        for r in out.data_mut().chunks_mut(k) {
            for j in 1..k {
                r[j] += r[j - 1];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::CumsumRows(a), rg)
    }

    /// Picks column `index[r]` from each row `r`: `[n, k] -> [n, 1]`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>) -> Var {
        let t = self.value(a);
        let (n, k) = (t.rows(), t.cols());
        assert_eq!(index.len(), n, "gather: one index per row");
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < k, "gather: index out of range");
                t.data()[r * k + c]
            })
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(n, 1, data).expect("shape"), Op::Gather(a, index), rg)
    }

    /// Elementwise `mask ? a : b`.
    pub fn select(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "select");
        assert_eq!(mask.len(), self.value(a).len());
        let data = mask
            .iter()
            .zip(self.value(a).data().iter().zip(self.value(b).data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).expect("shape"), Op::Select(mask, a, b), rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                for (dst, &v) in store.grad_mut(*id).data_mut().iter_mut().zip(g) {
                    *dst += v;
                }
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, vb.data(), true, &mut da, 0.0);
                    acc(grads, *a, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g, false, &mut db, 0.0);
                    acc(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, || g.to_vec());
                self.acc_if(grads, *b, || g.to_vec());
            }
            Op::AddRow(a, row) => {
                self.acc_if(grads, *a, || g.to_vec());
                let k = self.value(*row).len();
                self.acc_if(grads, *row, || {
                    let mut db = vec![0.0; k];
                    for r in g.chunks(k) {
                        for (d, &v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    db
                });
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, || g.to_vec());
                self.acc_if(grads, *b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_if(grads, *a, || zip_map(g, vb, |g, y| g * y));
                self.acc_if(grads, *b, || zip_map(g, va, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                self.acc_if(grads, *a, || zip_map(g, vb, |g, y| g / y));
                self.acc_if(grads, *b, || {
                    g.iter()
                        .zip(out.iter().zip(vb))
                        .map(|(&g, (&q, &y))| -g * q / y)
                        .collect()
                });
            }
            Op::Min(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let pick_a: Vec<bool> = va.iter().zip(vb).map(|(x, y)| x <= y).collect();
                self.acc_if(grads, *a, || {
                    g.iter().zip(&pick_a).map(|(&g, &p)| if p { g } else { 0.0 }).collect()
                });
                self.acc_if(grads, *b, || {
                    g.iter().zip(&pick_a).map(|(&g, &p)| if p { 0.0 } else { g }).collect()
                });
            }
            Op::DivScalar(a, s) => {
                let d = self.value(*s).item();
                self.acc_if(grads, *a, || g.iter().map(|v| v / d).collect());
                self.acc_if(grads, *s, || {
                    let dot: f64 = g.iter().zip(out).map(|(g, q)| g * q).sum();
                    vec![-dot / d]
                });
            }
            Op::Neg(a) => self.acc_if(grads, *a, || g.iter().map(|v| -v).collect()),
            Op::Scale(a, c) => self.acc_if(grads, *a, || g.iter().map(|v| c * v).collect()),
            Op::AddScalar(a) => self.acc_if(grads, *a, || g.to_vec()),
            Op::Square(a) => {
                let va = self.value(*a).data();
                self.acc_if(grads, *a, || zip_map(g, va, |g, x| 2.0 * g * x));
            }
            Op::Tanh(a) => self.acc_if(grads, *a, || zip_map(g, out, |g, y| g * (1.0 - y * y))),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.acc_if(grads, *a, || zip_map(g, va, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Sin(a, omega) => {
                let va = self.value(*a).data();
                self.acc_if(grads, *a, || zip_map(g, va, |g, x| g * omega * (omega * x).cos()));
            }
            Op::Exp(a) => self.acc_if(grads, *a, || zip_map(g, out, |g, y| g * y)),
            Op::Log(a) => {
                let va = self.value(*a).data();
                self.acc_if(grads, *a, || zip_map(g, va, |g, x| g / x));
            }
            Op::Softplus(a) => {
                let va = self.value(*a).data();
                self.acc_if(grads, *a, || zip_map(g, va, |g, x| g * sigmoid(x)));
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a).data();
                self.acc_if(grads, *a, || {
                    zip_map(g, va, |g, x| if x >= *lo && x <= *hi { g } else { 0.0 })
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc_if(grads, *a, || vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.acc_if(grads, *a, || vec![g[0] / n as f64; n]);
            }
            Op::SumCols(a) => {
                let k = self.value(*a).cols();
                self.acc_if(grads, *a, || {
                    g.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect()
                });
            }
            Op::Cols(a, start) => {
                let t = self.value(*a);
                let (n, k) = (t.rows(), t.cols());
                let len = node.value.cols();
                self.acc_if(grads, *a, || {
                    let mut d = vec![0.0; n * k];
                    for r in 0..n {
                        d[r * k + start..r * k + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    d
                });
            }
            Op::Concat(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc_if(grads, p, || {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        d
                    });
                    off += w;
                }
            }
            Op::Reshape(a) => self.acc_if(grads, *a, || g.to_vec()),
            Op::SoftmaxRows(a) => {
                let k = node.value.cols();
                self.acc_if(grads, *a, || {
                    let mut d = vec![0.0; g.len()];
                    for ((dr, gr), yr) in d.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    d
                });
            }
            Op::CumsumRows(a) => {
                let k = node.value.cols();
                self.acc_if(grads, *a, || {
                    let mut d = g.to_vec();
                    for r in d.chunks_mut(k) {
                        for j in (0..k - 1).rev() {
                            r[j] += r[j + 1];
                        }
                    }
                    d
                });
            }
            Op::Gather(a, index) => {
                let t = self.value(*a);
                let k = t.cols();
                let len = t.len();
                self.acc_if(grads, *a, || {
                    let mut d = vec![0.0; len];
                    for (r, &c) in index.iter().enumerate() {
                        d[r * k + c] += g[r];
                    }
                    d
                });
            }
            Op::Select(mask, a, b) => {
                self.acc_if(grads, *a, || {
                    g.iter().zip(mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect()
                });
                self.acc_if(grads, *b, || {
                    g.iter().zip(mask).map(|(&g, &m)| if m { 0.0 } else { g }).collect()
                });
            }
        }
    }

    fn acc_if(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce() -> Vec<f64>) {
        if self.rg(v) {
            acc(grads, v, &f());
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn zip_map(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&g, &x)| f(g, x)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}
