//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse. Rows of a matrix are nodes (optionally stacked in
//! batch blocks), columns are feature channels.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamSet};
use crate::sparse::CsrMatrix;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A constant sparse operator together with its transpose.
#[derive(Debug)]
pub struct SparseOp {
    pub forward: CsrMatrix,
    pub transpose: CsrMatrix,
}

impl SparseOp {
    pub fn new(forward: CsrMatrix) -> Arc<Self> {
        let transpose = forward.transpose();
        Arc::new(Self { forward, transpose })
    }
}

/// Edge-conditioned aggregation weights of a continuous-kernel convolution.
///
/// For target node `i` the entries list `(source, basis index, weight)`;
/// weights already include the mean-aggregation factor `1/deg(i)`.
#[derive(Debug, Clone)]
pub struct EdgeBasis {
    pub nodes: usize,
    pub basis: usize,
    pub indptr: Vec<usize>,
    pub source: Vec<usize>,
    pub kernel: Vec<usize>,
    pub weight: Vec<f64>,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    Sparse(Var, Arc<SparseOp>),
    EdgeConv(Var, Arc<EdgeBasis>),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a trainable parameter; repeated requests share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        self.push(value, Op::Div(a, b))
    }

    /// `a + row`, with `row` (1×C) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// Repeats a 1×C row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        let value = r.broadcast((n, r.ncols())).expect("row broadcast").to_owned();
        self.push(value, Op::BroadcastRows(row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        self.push(value, Op::AddScalar(a))
    }

    /// `1 − a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(elu);
        self.push(value, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Sum of all entries as a 1×1 matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a);
        let data: Vec<f64> = v.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), data).expect("reshape preserves size");
        self.push(value, Op::Reshape(a))
    }

    /// Applies a constant sparse operator to each node block of `a`.
    pub fn sparse(&mut self, op: &Arc<SparseOp>, a: Var) -> Var {
        let value = op.forward.mul_batched(self.value(a).view());
        self.push(value, Op::Sparse(a, Arc::clone(op)))
    }

    /// Edge-conditioned aggregation: `a` holds per-node messages for every
    /// kernel basis function side by side (`basis · C` columns); the result
    /// has `C` columns.
    pub fn edge_conv(&mut self, basis: &Arc<EdgeBasis>, a: Var) -> Var {
        let value = edge_conv_forward(basis, self.value(a));
        self.push(value, Op::EdgeConv(a, Arc::clone(basis)))
    }

    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        self.backward_from(vec![(output, Array2::ones((1, 1)))])
    }

    /// Reverse pass seeded with explicit upstream gradients.
    pub fn backward_from(&self, seeds: Vec<(Var, Mat)>) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], -&g);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = &g / bv;
                    let gb = -(&g * &node.value) / bv;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[a.0], g);
                }
                Op::BroadcastRows(row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], gr);
                }
                Op::Scale(a, k) => accumulate(&mut grads[a.0], g * *k),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g),
                Op::Elu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|gi, &y| {
                        if y <= 0.0 {
                            *gi *= y + 1.0;
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|gi, &y| *gi *= y * (1.0 - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|gi, &y| *gi *= 1.0 - y * y);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| *gi *= sigmoid(x));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], g * &node.value),
                Op::Ln(a) => accumulate(&mut grads[a.0], g / self.value(*a)),
                Op::Square(a) => accumulate(&mut grads[a.0], g * self.value(*a) * 2.0),
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        accumulate(&mut grads[p.0], g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        accumulate(&mut grads[p.0], g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let h = g.nrows();
                    ga.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Reshape(a) => {
                    let data: Vec<f64> = g.iter().copied().collect();
                    let ga = Array2::from_shape_vec(self.shape(*a), data).expect("same size");
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sparse(a, op) => {
                    let ga = op.transpose.mul_batched(g.view());
                    accumulate(&mut grads[a.0], ga);
                }
                Op::EdgeConv(a, basis) => {
                    let ga = edge_conv_backward(basis, &g, self.shape(*a));
                    accumulate(&mut grads[a.0], ga);
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter leaf that appeared on `tape`.
    pub fn params(&self, tape: &Tape) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<_> = tape
            .param_vars
            .iter()
            .filter_map(|(&id, v)| self.grads[v.0].as_ref().map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
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
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn edge_conv_forward(basis: &EdgeBasis, input: &Mat) -> Mat {
    let (rows, cols) = input.dim();
    assert_eq!(rows % basis.nodes, 0, "edge_conv rows must be a multiple of the node count");
    assert_eq!(cols % basis.basis, 0, "edge_conv columns must be a multiple of the basis size");
    let width = cols / basis.basis;
    let batch = rows / basis.nodes;
    let input = input.as_standard_layout();
    let x = input.as_slice().expect("standard layout");
    let mut out = Array2::zeros((rows, width));
    let o = out.as_slice_mut().expect("fresh array");
    for b in 0..batch {
        let base = b * basis.nodes;
        for i in 0..basis.nodes {
            let orow = &mut o[(base + i) * width..(base + i + 1) * width];
            for e in basis.indptr[i]..basis.indptr[i + 1] {
                let start = (base + basis.source[e]) * cols + basis.kernel[e] * width;
                let w = basis.weight[e];
                for (ov, xv) in orow.iter_mut().zip(&x[start..start + width]) {
                    *ov += w * xv;
                }
            }
        }
    }
    out
}

fn edge_conv_backward(basis: &EdgeBasis, grad: &Mat, input_shape: (usize, usize)) -> Mat {
    let (rows, cols) = input_shape;
    let width = cols / basis.basis;
    let batch = rows / basis.nodes;
    let grad = grad.as_standard_layout();
    let g = grad.as_slice().expect("standard layout");
    let mut out = Array2::zeros(input_shape);
    let o = out.as_slice_mut().expect("fresh array");
    for b in 0..batch {
        let base = b * basis.nodes;
        for i in 0..basis.nodes {
            let grow = &g[(base + i) * width..(base + i + 1) * width];
            for e in basis.indptr[i]..basis.indptr[i + 1] {
                let start = (base + basis.source[e]) * cols + basis.kernel[e] * width;
                let w = basis.weight[e];
                for (ov, gv) in o[start..start + width].iter_mut().zip(grow) {
                    *ov += w * gv;
                }
            }
        }
    }
    out
}
