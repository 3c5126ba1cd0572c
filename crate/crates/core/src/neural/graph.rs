//! Reverse-mode differentiation over a dynamically recorded trace.
//!
//! A [`Graph`] borrows the [`ParamStore`] it reads parameters from. Every
//! operation appends a node holding its forward value; [`Graph::backward`]
//! walks the trace in reverse and accumulates adjoints. Nodes that do not
//! depend on a parameter or a tracked variable are never visited.
//!
//! Primitive operations panic on shape mismatches (they indicate a bug in
//! the calling layer); layers validate user-facing shapes and return errors.

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SumCols(Var),
    SumAll(Var),
    MaskedSoftmax(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`; `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A non-parameter leaf whose gradient is recorded.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The current value of a stored parameter, inserted once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Leaf, true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Copies `v`'s value into a fresh constant; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_parts(va.rows(), va.cols(), data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), tracked)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_nt(self.value(a), self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMulNt(a, b), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `a[r,c] + bias[1,c]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        assert!(
            vb.rows() == 1 && vb.cols() == va.cols(),
            "bias shape {:?} for {:?}",
            vb.shape(),
            va.shape()
        );
        let c = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data()[i % c])
            .collect();
        let value = Tensor::from_parts(va.rows(), c, data);
        let tracked = self.tracked(a) || self.tracked(bias);
        self.push(value, Op::AddBias(a, bias), tracked)
    }

    /// `a[r,c] * col[r,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert!(
            vc.cols() == 1 && vc.rows() == va.rows(),
            "column shape {:?} for {:?}",
            vc.shape(),
            va.shape()
        );
        let c = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * vc.data()[i / c])
            .collect();
        let value = Tensor::from_parts(va.rows(), c, data);
        let tracked = self.tracked(a) || self.tracked(col);
        self.push(value, Op::MulCol(a, col), tracked)
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), k.shape());
        let data = va.data().iter().zip(k.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(va.rows(), va.cols(), data);
        let tracked = self.tracked(a);
        self.push(value, Op::MulConst(a, k), tracked)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows(), rows, "concat row mismatch");
                data.extend_from_slice(t.row_slice(r));
            }
        }
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(
            Tensor::from_parts(rows, cols, data),
            Op::Concat(parts.to_vec()),
            tracked,
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(
            start < end && end <= va.cols(),
            "column slice {start}..{end} of {:?}",
            va.shape()
        );
        let mut data = Vec::with_capacity(va.rows() * (end - start));
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row_slice(r)[start..end]);
        }
        let value = Tensor::from_parts(va.rows(), end - start, data);
        let tracked = self.tracked(a);
        self.push(value, Op::SliceCols(a, start), tracked)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(
            start < end && end <= va.rows(),
            "row slice {start}..{end} of {:?}",
            va.shape()
        );
        let c = va.cols();
        let value = Tensor::from_parts(end - start, c, va.data()[start * c..end * c].to_vec());
        let tracked = self.tracked(a);
        self.push(value, Op::SliceRows(a, start), tracked)
    }

    /// Row sums, `[r,c] -> [r,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row_slice(r).iter().sum()).collect();
        let value = Tensor::from_parts(va.rows(), 1, data);
        let tracked = self.tracked(a);
        self.push(value, Op::SumCols(a), tracked)
    }

    /// Sum of all entries as a `[1,1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::from_parts(1, 1, vec![s]), Op::SumAll(a), tracked)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries get weight 0 and a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[Vec<bool>]) -> Var {
        let vs = self.value(scores);
        let (rows, cols) = (vs.rows(), vs.cols());
        assert_eq!(mask.len(), rows, "mask rows");
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            assert_eq!(mask[r].len(), cols, "mask cols");
            let row = vs.row_slice(r);
            let max = row
                .iter()
                .zip(&mask[r])
                .filter(|(_, m)| **m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for c in 0..cols {
                if mask[r][c] {
                    let e = (row[c] - max).exp();
                    data[r * cols + c] = e;
                    total += e;
                }
            }
            for c in 0..cols {
                data[r * cols + c] /= total;
            }
        }
        let tracked = self.tracked(scores);
        self.push(Tensor::from_parts(rows, cols, data), Op::MaskedSoftmax(scores), tracked)
    }

    /// Adjoints of every tracked node with respect to the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        let ga = matmul_nt(&g, self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.tracked(*b) {
                        let gb = matmul_tn(self.value(*a), &g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.tracked(*a) {
                        let ga = matmul(&g, self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.tracked(*b) {
                        let gb = matmul_tn(&g, self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, *a, || g.clone());
                    self.send(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.send(&mut grads, *a, || g.clone());
                    self.send(&mut grads, *b, || g.map(|v| -v));
                }
                Op::AddBias(a, bias) => {
                    self.send(&mut grads, *a, || g.clone());
                    self.send(&mut grads, *bias, || column_sums(&g));
                }
                Op::Mul(a, b) => {
                    self.send(&mut grads, *a, || hadamard(&g, self.value(*b)));
                    self.send(&mut grads, *b, || hadamard(&g, self.value(*a)));
                }
                Op::Div(a, b) => {
                    let vb = self.value(*b);
                    self.send(&mut grads, *a, || zip_map(&g, vb, |gv, bv| gv / bv));
                    self.send(&mut grads, *b, || {
                        let t = zip_map(&g, y, |gv, yv| gv * yv);
                        zip_map(&t, vb, |tv, bv| -tv / bv)
                    });
                }
                Op::MulCol(a, col) => {
                    let va = self.value(*a);
                    let vc = self.value(*col);
                    let c = va.cols();
                    self.send(&mut grads, *a, || {
                        let data = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| gv * vc.data()[i / c])
                            .collect();
                        Tensor::from_parts(g.rows(), c, data)
                    });
                    self.send(&mut grads, *col, || {
                        let data = (0..g.rows())
                            .map(|r| g.row_slice(r).iter().zip(va.row_slice(r)).map(|(x, y)| x * y).sum())
                            .collect();
                        Tensor::from_parts(g.rows(), 1, data)
                    });
                }
                Op::MulConst(a, k) => self.send(&mut grads, *a, || hadamard(&g, k)),
                Op::Scale(a, k) => self.send(&mut grads, *a, || g.map(|v| v * k)),
                Op::AddScalar(a) => self.send(&mut grads, *a, || g.clone()),
                Op::Sigmoid(a) => self.send(&mut grads, *a, || zip_map(&g, y, |gv, s| gv * s * (1.0 - s))),
                Op::Tanh(a) => self.send(&mut grads, *a, || zip_map(&g, y, |gv, t| gv * (1.0 - t * t))),
                Op::Exp(a) => self.send(&mut grads, *a, || hadamard(&g, y)),
                Op::Ln(a) => self.send(&mut grads, *a, || zip_map(&g, self.value(*a), |gv, x| gv / x)),
                Op::Softplus(a) => self.send(&mut grads, *a, || zip_map(&g, self.value(*a), |gv, x| gv * sigmoid(x))),
                Op::Square(a) => self.send(&mut grads, *a, || zip_map(&g, self.value(*a), |gv, x| 2.0 * gv * x)),
                Op::Clamp(a, lo, hi) => self.send(&mut grads, *a, || {
                    zip_map(&g, self.value(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 })
                }),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.tracked(*p) {
                            accumulate(&mut grads, *p, cols_of(&g, offset, offset + w));
                        }
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => self.send(&mut grads, *a, || {
                    let va = self.value(*a);
                    let mut full = Tensor::zeros(va.rows(), va.cols());
                    let w = g.cols();
                    let c = va.cols();
                    for r in 0..g.rows() {
                        full.data_mut()[r * c + start..r * c + start + w].copy_from_slice(g.row_slice(r));
                    }
                    full
                }),
                Op::SliceRows(a, start) => self.send(&mut grads, *a, || {
                    let va = self.value(*a);
                    let mut full = Tensor::zeros(va.rows(), va.cols());
                    let c = va.cols();
                    full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    full
                }),
                Op::SumCols(a) => self.send(&mut grads, *a, || {
                    let va = self.value(*a);
                    let c = va.cols();
                    let data = (0..va.len()).map(|i| g.data()[i / c]).collect();
                    Tensor::from_parts(va.rows(), c, data)
                }),
                Op::SumAll(a) => self.send(&mut grads, *a, || {
                    let va = self.value(*a);
                    Tensor::filled(va.rows(), va.cols(), g.scalar())
                }),
                Op::MaskedSoftmax(a) => self.send(&mut grads, *a, || {
                    let c = y.cols();
                    let mut out = Tensor::zeros(y.rows(), c);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out.data_mut()[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    out
                }),
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn send(&self, grads: &mut [Option<Tensor>], target: Var, make: impl FnOnce() -> Tensor) {
        if self.tracked(target) {
            accumulate(grads, target, make());
        }
    }

    /// Gradients of the stored parameters that took part in this graph.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(self.store);
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                out.set(ParamId::from_index(i), g.clone());
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_parts(a.rows(), a.cols(), data)
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::from_parts(1, c, out)
}

fn cols_of(g: &Tensor, start: usize, end: usize) -> Tensor {
    let mut data = Vec::with_capacity(g.rows() * (end - start));
    for r in 0..g.rows() {
        data.extend_from_slice(&g.row_slice(r)[start..end]);
    }
    Tensor::from_parts(g.rows(), end - start, data)
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
