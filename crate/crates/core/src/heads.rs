//! Pretraining heads, the score regressor and every loss.
//!
//! * Type discrimination: a GCN over the pooled node adjacency, averaged
//!   over nodes into one code per graph, trained with a margin triplet loss
//!   on squared Euclidean distances.
//! * Fuzzy level prediction: a two-layer hyper predictor maps
//!   `[v_i ∥ E'_i]` to `(μ_i, σ_i)` and the level is the reparameterized
//!   draw `y_i = μ_i + σ_i·ε_i`.
//! * Score regression: a two-layer head over `[v_i ∥ e_{i,i}]`.

use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dgr::{edge_pooling, normalize_adjacency_var, self_loop_edges, DgrVars, GcnStack};
use crate::nn::{Bound, Mlp};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

/// Floor added to the softplus scale.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HeadError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{which} must be nonnegative, got {value}")]
    Negative { which: &'static str, value: f64 },
    #[error("length mismatch: {lhs} predictions vs {rhs} targets")]
    Length { lhs: usize, rhs: usize },
}

/// Which DGR parts the score regressor reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInput {
    NodesAndEdges,
    NodesOnly,
    EdgesOnly,
}

impl HeadInput {
    pub fn name(self) -> &'static str {
        match self {
            HeadInput::NodesAndEdges => "nodes-and-edges",
            HeadInput::NodesOnly => "nodes-only",
            HeadInput::EdgesOnly => "edges-only",
        }
    }

    pub fn width(self, node_dim: usize, edge_dim: usize) -> usize {
        match self {
            HeadInput::NodesAndEdges => node_dim + edge_dim,
            HeadInput::NodesOnly => node_dim,
            HeadInput::EdgesOnly => edge_dim,
        }
    }
}

/// Type discrimination code: `V ← ReLU(Â_V·V·W)` per layer, then the mean
/// over nodes.
pub fn tdn_code(tape: &mut Tape, p: &Bound, tdn: &GcnStack, dgr: &DgrVars) -> Result<Var, TensorError> {
    let adj_hat = normalize_adjacency_var(tape, dgr.node_adjacency)?;
    let h = tdn.forward(tape, p, adj_hat, dgr.nodes, false)?;
    tape.mean_over_axis(h, 0)
}

/// `max(d(a, p) − d(a, n) + margin, 0)` with squared Euclidean `d`.
pub fn triplet_loss(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negative: Var,
    margin: f64,
) -> Result<Var, HeadError> {
    if !(margin >= 0.0) {
        return Err(HeadError::Negative {
            which: "margin",
            value: margin,
        });
    }
    let dp = tape.squared_l2_distance(anchor, positive)?;
    let dn = tape.squared_l2_distance(anchor, negative)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(diff, margin);
    Ok(tape.relu(shifted))
}

/// Standard normal draws for the reparameterization.
pub fn sample_epsilon(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LevelPredictionVars {
    pub mu: Var,
    pub sigma: Var,
    pub y: Var,
}

/// Materialized level prediction; `y = mu + sigma ⊙ epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub y: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl LevelPredictionVars {
    pub fn materialize(&self, tape: &Tape, epsilon: &[f64]) -> LevelPrediction {
        LevelPrediction {
            mu: tape.value(self.mu).data().to_vec(),
            sigma: tape.value(self.sigma).data().to_vec(),
            y: tape.value(self.y).data().to_vec(),
            epsilon: epsilon.to_vec(),
        }
    }
}

/// Reparameterized draw `y = mu + sigma ⊙ ε` for fixed noise `ε`.
pub fn reparameterize(tape: &mut Tape, mu: Var, sigma: Var, epsilon: &[f64]) -> Result<Var, TensorError> {
    let eps = tape.constant(Tensor::new(tape.shape(mu).to_vec(), epsilon.to_vec())?);
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

/// Hyper predictor over `[v_i ∥ E'_i]` emitting `(μ_i, σ_i)` per node,
/// `σ = softplus(s) + 1e-4`, followed by the reparameterized draw.
pub fn fpn_predict(
    tape: &mut Tape,
    p: &Bound,
    hyper: &Mlp,
    dgr: &DgrVars,
    epsilon: &[f64],
) -> Result<LevelPredictionVars, TensorError> {
    let n = dgr.n;
    if epsilon.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "fpn_predict",
            lhs: alloc::vec![n],
            rhs: alloc::vec![epsilon.len()],
        });
    }
    let pooled = edge_pooling(tape, dgr.edges, n)?;
    let input = tape.concat_cols(dgr.nodes, pooled)?;
    let out = hyper.forward(tape, p, input)?;
    let mu = tape.slice_cols(out, 0, 1)?;
    let mu = tape.reshape(mu, &[n])?;
    let s = tape.slice_cols(out, 1, 1)?;
    let s = tape.reshape(s, &[n])?;
    let sp = tape.softplus(s);
    let sigma = tape.add_scalar(sp, SIGMA_FLOOR);
    let y = reparameterize(tape, mu, sigma, epsilon)?;
    Ok(LevelPredictionVars { mu, sigma, y })
}

/// `Σ_i (y_i − target_i)²`.
pub fn level_loss(tape: &mut Tape, y: Var, targets: &[f64]) -> Result<Var, HeadError> {
    let n = tape.value(y).numel();
    if n != targets.len() {
        return Err(HeadError::Length {
            lhs: n,
            rhs: targets.len(),
        });
    }
    let t = tape.constant(Tensor::new(tape.shape(y).to_vec(), targets.to_vec())?);
    let d = tape.sub(y, t)?;
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_dist: f64,
    pub l_level: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `total = l_dist + λ·l_level`.
pub fn combined_loss(l_dist: f64, l_level: f64, lambda: f64) -> Result<LossBundle, HeadError> {
    for (which, value) in [("l_dist", l_dist), ("l_level", l_level), ("lambda", lambda)] {
        if !(value >= 0.0) {
            return Err(HeadError::Negative { which, value });
        }
    }
    Ok(LossBundle {
        l_dist,
        l_level,
        lambda,
        total: l_dist + lambda * l_level,
    })
}

/// Tape version of [`combined_loss`]; evaluates to the same `total`.
pub fn combined_loss_var(tape: &mut Tape, l_dist: Var, l_level: Var, lambda: f64) -> Result<Var, TensorError> {
    let weighted = tape.scale(l_level, lambda);
    tape.add(l_dist, weighted)
}

/// Per-node score from the regression head, shape `[N]`.
pub fn regression_score(
    tape: &mut Tape,
    p: &Bound,
    head: &Mlp,
    dgr: &DgrVars,
    input: HeadInput,
) -> Result<Var, TensorError> {
    let n = dgr.n;
    let x = match input {
        HeadInput::NodesOnly => dgr.nodes,
        HeadInput::EdgesOnly => self_loop_edges(tape, dgr.edges, n)?,
        HeadInput::NodesAndEdges => {
            let loops = self_loop_edges(tape, dgr.edges, n)?;
            tape.concat_cols(dgr.nodes, loops)?
        }
    };
    let out = head.forward(tape, p, x)?;
    tape.reshape(out, &[n])
}

/// `(1/N)·Σ (pred_i − gt_i)²`.
pub fn score_loss(tape: &mut Tape, pred: Var, gt: &[f64]) -> Result<Var, HeadError> {
    let n = tape.value(pred).numel();
    if n != gt.len() {
        return Err(HeadError::Length { lhs: n, rhs: gt.len() });
    }
    let t = tape.constant(Tensor::new(tape.shape(pred).to_vec(), gt.to_vec())?);
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}
