//! Differentiable layers shared by the surrogate and the meta-model.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{EdgeBasis, SparseOp, Tape, Var};
use crate::geometry::{GraphHierarchy, GraphLevel};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};

/// Row-wise affine map `x·W + b`; on node-feature matrices this is a 1×1 convolution.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = params.add_glorot(&format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| params.add_zeros(&format!("{name}.bias"), (1, fan_out)));
        Self { weight, bias }
    }

    /// Square identity weight with a zero bias.
    pub fn identity(params: &mut ParamSet, name: &str, width: usize) -> Self {
        let weight = params.add(format!("{name}.weight"), ndarray::Array2::eye(width));
        let bias = Some(params.add_zeros(&format!("{name}.bias"), (1, width)));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Degree-1 open B-spline basis over `[0, 1]^3` with `kernel_size` control
/// points per axis. Returns the nonzero `(basis index, weight)` pairs.
pub fn spline_basis(attr: [f64; 3], kernel_size: usize) -> Vec<(usize, f64)> {
    assert!(kernel_size >= 2, "kernel_size must be ≥ 2");
    let mut per_axis = [[(0usize, 0.0f64); 2]; 3];
    for (axis, slot) in per_axis.iter_mut().enumerate() {
        let p = attr[axis].clamp(0.0, 1.0) * (kernel_size - 1) as f64;
        let lo = (p.floor() as usize).min(kernel_size - 2);
        let frac = p - lo as f64;
        *slot = [(lo, 1.0 - frac), (lo + 1, frac)];
    }
    let mut out = Vec::with_capacity(8);
    for &(i, wi) in &per_axis[0] {
        for &(j, wj) in &per_axis[1] {
            for &(k, wk) in &per_axis[2] {
                let w = wi * wj * wk;
                if w != 0.0 {
                    out.push(((i * kernel_size + j) * kernel_size + k, w));
                }
            }
        }
    }
    out
}

/// Mean-aggregated continuous-kernel weights for every directed edge of `level`.
pub fn edge_basis(level: &GraphLevel, kernel_size: usize) -> EdgeBasis {
    let n = level.node_count;
    let mut incoming: Vec<Vec<(usize, [f64; 3])>> = vec![Vec::new(); n];
    for (target, source, attr) in level.directed_edges() {
        incoming[target].push((source, attr));
    }
    let mut indptr = vec![0];
    let (mut source, mut kernel, mut weight) = (Vec::new(), Vec::new(), Vec::new());
    for edges in &incoming {
        let inv_deg = if edges.is_empty() { 0.0 } else { 1.0 / edges.len() as f64 };
        for &(s, attr) in edges {
            for (k, w) in spline_basis(attr, kernel_size) {
                source.push(s);
                kernel.push(k);
                weight.push(w * inv_deg);
            }
        }
        indptr.push(source.len());
    }
    EdgeBasis { nodes: n, basis: kernel_size.pow(3), indptr, source, kernel, weight }
}

/// Precomputed constant graph operators for one hierarchy.
#[derive(Debug, Clone)]
pub struct GraphOps {
    pub node_counts: Vec<usize>,
    pub bases: Vec<Arc<EdgeBasis>>,
    pub pool: Vec<Arc<SparseOp>>,
    pub unpool: Vec<Arc<SparseOp>>,
    pub adjacency: Arc<SparseOp>,
}

impl GraphOps {
    pub fn new(hier: &GraphHierarchy, kernel_size: usize) -> Self {
        Self {
            node_counts: hier.node_counts(),
            bases: hier.levels.iter().map(|l| Arc::new(edge_basis(l, kernel_size))).collect(),
            pool: (0..hier.assign.len()).map(|l| SparseOp::new(hier.pool_matrix(l))).collect(),
            unpool: (0..hier.assign.len()).map(|l| SparseOp::new(hier.unpool_matrix(l))).collect(),
            adjacency: SparseOp::new(hier.finest().normalized_adjacency()),
        }
    }

    pub fn levels(&self) -> usize {
        self.node_counts.len()
    }

    pub fn finest_nodes(&self) -> usize {
        self.node_counts[0]
    }

    pub fn coarsest_nodes(&self) -> usize {
        *self.node_counts.last().expect("levels")
    }

    /// Pools a batched finest-level signal all the way to the coarsest level.
    pub fn pool_to_coarsest(&self, tape: &mut Tape, mut x: Var) -> Var {
        for op in &self.pool {
            x = tape.sparse(op, x);
        }
        x
    }
}

/// Residual graph block: `ELU(spline_conv(x)) + x·W_skip`, where the spline
/// convolution includes a root weight and bias.
#[derive(Debug, Clone)]
pub struct GcnnBlock {
    pub kernel: ParamId,
    pub root: ParamId,
    pub bias: ParamId,
    pub skip: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub basis: usize,
}

impl GcnnBlock {
    pub fn new(params: &mut ParamSet, name: &str, cin: usize, cout: usize, basis: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (cin + cout) as f64).sqrt();
        Self {
            kernel: params.add_uniform(&format!("{name}.kernel"), (cin, basis * cout), bound, rng),
            root: params.add_glorot(&format!("{name}.root"), cin, cout, rng),
            bias: params.add_zeros(&format!("{name}.bias"), (1, cout)),
            skip: params.add_glorot(&format!("{name}.skip"), cin, cout, rng),
            in_channels: cin,
            out_channels: cout,
            basis,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, basis: &Arc<EdgeBasis>) -> Result<Var> {
        let (rows, width) = tape.shape(x);
        if width != self.in_channels {
            return Err(Error::shape(format!("block expects {} channels, got {width}", self.in_channels)));
        }
        if rows % basis.nodes != 0 || basis.basis != self.basis {
            return Err(Error::shape(format!(
                "{rows} rows / {} basis functions do not match a level of {} nodes / {} basis functions",
                self.basis, basis.nodes, basis.basis
            )));
        }
        let kernel = tape.param(self.kernel);
        let messages = tape.matmul(x, kernel);
        let agg = tape.edge_conv(basis, messages);
        let root = tape.param(self.root);
        let own = tape.matmul(x, root);
        let pre = tape.add(agg, own);
        let bias = tape.param(self.bias);
        let pre = tape.add_row(pre, bias);
        let act = tape.elu(pre);
        let skip = tape.param(self.skip);
        let res = tape.matmul(x, skip);
        Ok(tape.add(act, res))
    }
}

/// Graph-convolutional GRU cell on the finest level with normalized adjacency `Â`:
///
/// ```text
/// [r, u] = σ([ÂX, ÂH]·W_ru + b_ru)
/// n      = tanh([ÂX, Â(r⊙H)]·W_n + b_n)
/// H'     = u⊙H + (1−u)⊙n
/// ```
#[derive(Debug, Clone)]
pub struct GcnGruCell {
    pub gates: Linear,
    pub candidate: Linear,
    pub hidden: usize,
}

impl GcnGruCell {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            gates: Linear::new(params, &format!("{name}.gates"), input + hidden, 2 * hidden, true, rng),
            candidate: Linear::new(params, &format!("{name}.candidate"), input + hidden, hidden, true, rng),
            hidden,
        }
    }

    /// One step; `ax` is the already-propagated input `ÂX`.
    pub fn step(&self, tape: &mut Tape, adjacency: &Arc<SparseOp>, ax: Var, h: Var) -> Var {
        let ah = tape.sparse(adjacency, h);
        let xh = tape.concat_cols(&[ax, ah]);
        let gates = self.gates.forward(tape, xh);
        let gates = tape.sigmoid(gates);
        let r = tape.slice_cols(gates, 0, self.hidden);
        let u = tape.slice_cols(gates, self.hidden, 2 * self.hidden);
        let rh = tape.mul(r, h);
        let arh = tape.sparse(adjacency, rh);
        let xrh = tape.concat_cols(&[ax, arh]);
        let n = self.candidate.forward(tape, xrh);
        let n = tape.tanh(n);
        let keep = tape.mul(u, h);
        let one_minus_u = tape.one_minus(u);
        let fresh = tape.mul(one_minus_u, n);
        tape.add(keep, fresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spline_basis_is_a_partition_of_unity() {
        for attr in [[0.0, 0.5, 1.0], [0.3, 0.7, 0.11], [1.0, 1.0, 1.0]] {
            for k in [2, 3, 5] {
                let b = spline_basis(attr, k);
                let total: f64 = b.iter().map(|(_, w)| w).sum();
                assert!((total - 1.0).abs() < 1e-12);
                assert!(b.iter().all(|&(i, w)| i < k * k * k && w > 0.0));
            }
        }
        assert_eq!(spline_basis([0.0, 0.0, 0.0], 2), vec![(0, 1.0)]);
        assert_eq!(spline_basis([1.0, 1.0, 1.0], 2), vec![(7, 1.0)]);
    }

    #[test]
    fn edge_basis_weights_average_over_neighbours() {
        let g = GraphLevel::from_edges(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [(0, 1), (0, 2)]);
        let b = edge_basis(&g, 2);
        let row0: f64 = b.weight[b.indptr[0]..b.indptr[1]].iter().sum();
        assert!((row0 - 1.0).abs() < 1e-12);
        let row1: f64 = b.weight[b.indptr[1]..b.indptr[2]].iter().sum();
        assert!((row1 - 1.0).abs() < 1e-12);
    }
}
