//! Distortion graph representation (DGR) construction.
//!
//! A batch of `N` feature vectors becomes a graph whose nodes are learned
//! embeddings and whose edges are `C_E`-vectors. Edge `(i, j)` lives at row
//! `i·N + j` of an `N²×C` matrix on the tape; the edge builder is a GCN
//! over the line graph of the complete directed graph with self-loops, i.e.
//! two edges are neighbours when they share an endpoint.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::nn::{he_normal, Bound, Mlp, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

/// Weight matrices of an `L`-layer GCN, `H ← act(Â·H·W)`.
#[derive(Debug, Clone)]
pub struct GcnStack {
    pub weights: Vec<ParamId>,
    pub widths: Vec<usize>,
}

impl GcnStack {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "a GCN stack needs at least one layer");
        let weights = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| store.add(alloc::format!("{name}.{i}.weight"), he_normal(&[w[0], w[1]], w[0], rng)))
            .collect();
        Self {
            weights,
            widths: widths.to_vec(),
        }
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    /// Runs every layer over `x` with the fixed propagation matrix
    /// `adj_hat`. ReLU follows every layer except, when `linear_last`, the
    /// final one.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        adj_hat: Var,
        x: Var,
        linear_last: bool,
    ) -> Result<Var, TensorError> {
        if tape.shape(x).get(1) != Some(&self.in_dim()) {
            return Err(TensorError::ShapeMismatch {
                op: "gcn",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.in_dim()],
            });
        }
        let mut h = x;
        for (l, w) in self.weights.iter().enumerate() {
            let agg = tape.matmul(adj_hat, h)?;
            h = tape.matmul(agg, p.var(*w))?;
            if !(linear_last && l + 1 == self.weights.len()) {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.weights.clone()
    }
}

/// Binary `N²×N²` adjacency of the line graph: edges `(i, j)` and `(p, q)`
/// are adjacent when they share an endpoint and are not the same edge.
pub fn line_graph_adjacency(n: usize) -> Tensor {
    let m = n * n;
    let mut a = Tensor::zeros(&[m, m]);
    let d = a.data_mut();
    for e in 0..m {
        let (i, j) = (e / n, e % n);
        for f in 0..m {
            let (p, q) = (f / n, f % n);
            if e != f && (i == p || i == q || j == p || j == q) {
                d[e * m + f] = 1.0;
            }
        }
    }
    a
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor, TensorError> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(TensorError::Rank {
            op: "normalize_adjacency",
            expected: 2,
            shape: a.shape().to_vec(),
        });
    }
    let m = a.shape()[0];
    let mut out = a.clone();
    let d = out.data_mut();
    for i in 0..m {
        d[i * m + i] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..m)
        .map(|i| 1.0 / libm::sqrt(d[i * m..(i + 1) * m].iter().sum::<f64>()))
        .collect();
    for i in 0..m {
        for j in 0..m {
            d[i * m + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(out)
}

/// Differentiable [`normalize_adjacency`] for a learned adjacency.
pub fn normalize_adjacency_var(tape: &mut Tape, a: Var) -> Result<Var, TensorError> {
    let s = tape.shape(a).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(TensorError::Rank {
            op: "normalize_adjacency",
            expected: 2,
            shape: s,
        });
    }
    let n = s[0];
    let eye = tape.constant(Tensor::identity(n));
    let with_loops = tape.add(a, eye)?;
    let degree = tape.sum_over_axis(with_loops, 1)?;
    let inv_sqrt = tape.powf(degree, -0.5);
    let col = tape.reshape(inv_sqrt, &[n, 1])?;
    let row = tape.reshape(inv_sqrt, &[1, n])?;
    let outer = tape.matmul(col, row)?;
    tape.mul(with_loops, outer)
}

/// Node embeddings `v_i = NB(f_i)`, applied row-wise.
pub fn build_nodes(tape: &mut Tape, p: &Bound, node_builder: &Mlp, features: Var) -> Result<Var, TensorError> {
    node_builder.forward(tape, p, features)
}

/// Initial edges `e⁰_{i,j} = v_i ⊙ v_j` as an `N²×C` matrix.
pub fn init_edges(tape: &mut Tape, nodes: Var) -> Result<Var, TensorError> {
    let n = tape.shape(nodes)[0];
    let left: Vec<usize> = (0..n * n).map(|e| e / n).collect();
    let right: Vec<usize> = (0..n * n).map(|e| e % n).collect();
    let vl = tape.select_rows(nodes, &left)?;
    let vr = tape.select_rows(nodes, &right)?;
    tape.mul(vl, vr)
}

/// Edge builder: GCN over the normalized line graph, linear final layer.
pub fn edge_gcn(tape: &mut Tape, p: &Bound, stack: &GcnStack, e0: Var, n: usize) -> Result<Var, TensorError> {
    if tape.shape(e0)[0] != n * n {
        return Err(TensorError::ShapeMismatch {
            op: "edge_gcn",
            lhs: tape.shape(e0).to_vec(),
            rhs: vec![n * n],
        });
    }
    let adj_hat = tape.constant(normalize_adjacency(&line_graph_adjacency(n))?);
    stack.forward(tape, p, adj_hat, e0, true)
}

/// Channel mean of every edge, symmetrized and made nonnegative:
/// `|(M + Mᵀ)/2|` with `M[i, j] = mean_c e_{i,j,c}`.
pub fn node_pooling(tape: &mut Tape, edges: Var, n: usize) -> Result<Var, TensorError> {
    let mean = tape.mean_over_axis(edges, 1)?;
    let m = tape.reshape(mean, &[n, n])?;
    let mt = tape.transpose(m)?;
    let sum = tape.add(m, mt)?;
    let sym = tape.scale(sum, 0.5);
    Ok(tape.abs(sym))
}

/// `E'_i = (Σ_j e_{i,j}) / N`.
pub fn edge_pooling(tape: &mut Tape, edges: Var, n: usize) -> Result<Var, TensorError> {
    let c = tape.shape(edges)[1];
    let cube = tape.reshape(edges, &[n, n, c])?;
    tape.mean_over_axis(cube, 1)
}

/// Row `i` is the self-loop edge `e_{i,i}`.
pub fn self_loop_edges(tape: &mut Tape, edges: Var, n: usize) -> Result<Var, TensorError> {
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    tape.select_rows(edges, &diag)
}

/// Node builder and edge builder, the learned part of DGR construction.
#[derive(Debug, Clone)]
pub struct DgrBuilder {
    pub node_builder: Mlp,
    pub edge_builder: GcnStack,
}

/// Tape handles of one graph.
#[derive(Debug, Clone, Copy)]
pub struct DgrVars {
    pub n: usize,
    /// `N×C`
    pub nodes: Var,
    /// `N²×C_E`, row `i·N + j` is edge `(i, j)`
    pub edges: Var,
    /// `N×N`, from [`node_pooling`]
    pub node_adjacency: Var,
}

impl DgrBuilder {
    pub fn new(store: &mut ParamStore, feature_dim: usize, nb_layers: usize, gcn_layers: usize, edge_dim: usize, rng: &mut Rng) -> Self {
        let nb_widths = vec![feature_dim; nb_layers + 1];
        let node_builder = Mlp::new(store, "node_builder", &nb_widths, rng);
        let mut eb_widths = vec![feature_dim; gcn_layers];
        eb_widths.push(edge_dim);
        let edge_builder = GcnStack::new(store, "edge_builder", &eb_widths, rng);
        Self {
            node_builder,
            edge_builder,
        }
    }

    pub fn build(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<DgrVars, TensorError> {
        let n = tape.shape(features)[0];
        let nodes = build_nodes(tape, p, &self.node_builder, features)?;
        let e0 = init_edges(tape, nodes)?;
        let edges = edge_gcn(tape, p, &self.edge_builder, e0, n)?;
        let node_adjacency = node_pooling(tape, edges, n)?;
        Ok(DgrVars {
            n,
            nodes,
            edges,
            node_adjacency,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.node_builder.params();
        v.extend(self.edge_builder.params());
        v
    }
}

/// A materialized graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Dgr {
    /// `N×C`
    pub nodes: Tensor,
    /// `N×N×C_E`
    pub edges: Tensor,
    /// `N×N`
    pub node_adjacency: Tensor,
    pub type_id: Option<usize>,
}

impl Dgr {
    pub fn from_vars(tape: &Tape, vars: &DgrVars, type_id: Option<usize>) -> Self {
        let n = vars.n;
        let edges = tape.value(vars.edges);
        let ce = edges.shape()[1];
        Self {
            nodes: tape.value(vars.nodes).clone(),
            edges: edges.clone().reshaped(&[n, n, ce]).expect("N²×C_E"),
            node_adjacency: tape.value(vars.node_adjacency).clone(),
            type_id,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn edge_dim(&self) -> usize {
        self.edges.shape()[2]
    }

    /// Edge `(i, j)` as a `C_E` slice.
    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        let (n, c) = (self.len(), self.edge_dim());
        &self.edges.data()[(i * n + j) * c..(i * n + j + 1) * c]
    }

    /// Re-enters this graph on `tape` as constants.
    pub fn to_vars(&self, tape: &mut Tape) -> DgrVars {
        let n = self.len();
        let flat = self.edges.clone().reshaped(&[n * n, self.edge_dim()]).expect("N×N×C_E");
        DgrVars {
            n,
            nodes: tape.constant(self.nodes.clone()),
            edges: tape.constant(flat),
            node_adjacency: tape.constant(self.node_adjacency.clone()),
        }
    }
}
