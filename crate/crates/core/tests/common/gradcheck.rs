//! Central finite-difference checks of every differentiable operation.
//!
//! Each suite returns one entry per operation with the worst relative
//! error seen over its comparable instances.

use dgrlab_core::autodiff::{Tape, Var};
use dgrlab_core::backbone::Backbone;
use dgrlab_core::dgr::{
    edge_gcn, edge_pooling, init_edges, node_pooling, normalize_adjacency_var, DgrBuilder, DgrVars, GcnStack,
};
use dgrlab_core::heads::{
    combined_loss_var, fpn_predict, level_loss, regression_score, sample_epsilon, score_loss, tdn_code, triplet_loss,
    HeadInput,
};
use dgrlab_core::nn::{Bound, Conv2d, Mlp, ParamId, ParamStore};
use dgrlab_core::rng::Rng;
use dgrlab_core::Tensor;
use rand::{Rng as _, SeedableRng};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;

/// Entries uniform in `[-2, 2]`.
fn uniform(shape: &[usize], r: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-2.0..=2.0)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every
/// output element contributes to the checked gradient.
fn contract(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.constant(Tensor::new(tape.shape(out).to_vec(), weights.data().to_vec()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn evaluate(store: &ParamStore, f: &dyn Fn(&mut Tape, &Bound) -> Var) -> (f64, Vec<i8>) {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let loss = f(&mut tape, &p);
    (tape.value(loss).data()[0], tape.kink_signature())
}

/// Relative error between the analytic gradient of every entry of `store`
/// and central differences. `None` when a perturbation crosses a ReLU/abs
/// kink, in which case the instance is not comparable.
fn check(store: &ParamStore, f: &dyn Fn(&mut Tape, &Bound) -> Var) -> Option<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true);
    let loss = f(&mut tape, &p);
    let sig = tape.kink_signature();
    if sig.contains(&0) {
        return None;
    }
    let grads = p.collect(&tape.backward(loss).unwrap()).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for k in 0..store.get(id).numel() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[k] += H;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[k] -= H;
            let (fp, sp) = evaluate(&plus, f);
            let (fm, sm) = evaluate(&minus, f);
            if sp != sig || sm != sig {
                return None;
            }
            numeric.push((fp - fm) / (2.0 * H));
            analytic.push(grads.get(id).data()[k]);
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    Some(if na.max(nn) == 0.0 { 0.0 } else { diff / na.max(nn) })
}

type Instance = (ParamStore, Box<dyn Fn(&mut Tape, &Bound) -> Var>);

/// Outcome of one operation's suite.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub label: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.worst < TOL
    }
}

/// Runs `make` on fresh seeds until `INSTANCES` instances were comparable.
fn suite(out: &mut Vec<GradResult>, label: &'static str, make: impl Fn(&mut Rng) -> Instance) {
    let mut res = GradResult {
        label,
        instances: 0,
        worst: 0.0,
    };
    for seed in 0..(INSTANCES as u64 * 5) {
        let mut r = Rng::seed_from_u64(seed);
        let (store, f) = make(&mut r);
        if let Some(rel) = check(&store, &*f) {
            res.instances += 1;
            res.worst = res.worst.max(rel);
            if res.instances == INSTANCES {
                break;
            }
        }
    }
    out.push(res);
}

fn inputs(r: &mut Rng, shapes: &[&[usize]]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, sh)| s.add(format!("x{i}"), uniform(sh, r)))
        .collect();
    (s, ids)
}

pub fn elementwise_and_linear_algebra() -> Vec<GradResult> {
    let mut out = Vec::new();
    suite(&mut out, "matmul", |r| {
        let (s, x) = inputs(r, &[&[3, 4], &[4, 2]]);
        let w = uniform(&[3, 2], r);
        (s, Box::new(move |t, p| {
            let y = t.matmul(p.var(x[0]), p.var(x[1])).unwrap();
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "add_sub_mul", |r| {
        let (s, x) = inputs(r, &[&[2, 3], &[2, 3], &[2, 3]]);
        let w = uniform(&[2, 3], r);
        (s, Box::new(move |t, p| {
            let a = t.add(p.var(x[0]), p.var(x[1])).unwrap();
            let b = t.sub(a, p.var(x[2])).unwrap();
            let c = t.mul(b, p.var(x[0])).unwrap();
            contract(t, c, &w)
        }))
    });
    suite(&mut out, "add_row_scale_shift", |r| {
        let (s, x) = inputs(r, &[&[4, 3], &[3]]);
        let w = uniform(&[4, 3], r);
        (s, Box::new(move |t, p| {
            let y = t.add_row(p.var(x[0]), p.var(x[1])).unwrap();
            let y = t.scale(y, -1.7);
            let y = t.add_scalar(y, 0.3);
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "relu", |r| {
        let (s, x) = inputs(r, &[&[5, 4]]);
        let w = uniform(&[5, 4], r);
        (s, Box::new(move |t, p| {
            let y = t.relu(p.var(x[0]));
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "abs", |r| {
        let (s, x) = inputs(r, &[&[5, 4]]);
        let w = uniform(&[5, 4], r);
        (s, Box::new(move |t, p| {
            let y = t.abs(p.var(x[0]));
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "softplus_square", |r| {
        let (s, x) = inputs(r, &[&[6]]);
        let w = uniform(&[6], r);
        (s, Box::new(move |t, p| {
            let a = t.scale(p.var(x[0]), 8.0);
            let y = t.softplus(a);
            let y = t.square(y);
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "powf", |r| {
        let (mut s, x) = inputs(r, &[&[6]]);
        for v in s.get_mut(x[0]).data_mut() {
            *v = 0.5 + v.abs();
        }
        let w = uniform(&[6], r);
        (s, Box::new(move |t, p| {
            let y = t.powf(p.var(x[0]), -0.5);
            contract(t, y, &w)
        }))
    });
    out
}

pub fn reductions_and_reshaping() -> Vec<GradResult> {
    let mut out = Vec::new();
    suite(&mut out, "sum_mean", |r| {
        let (s, x) = inputs(r, &[&[3, 5]]);
        (s, Box::new(move |t, p| {
            let a = t.sum(p.var(x[0]));
            let sq = t.square(p.var(x[0]));
            let b = t.mean(sq);
            let b = t.scale(b, 3.0);
            t.add(a, b).unwrap()
        }))
    });
    for axis in 0..3 {
        let label = ["over_axis.0", "over_axis.1", "over_axis.2"][axis];
        suite(&mut out, label, |r| {
            let (s, x) = inputs(r, &[&[2, 3, 4]]);
            let mut shape = vec![2, 3, 4];
            shape.remove(axis);
            let w = uniform(&shape, r);
            let w2 = w.clone();
            (s, Box::new(move |t, p| {
                let m = t.mean_over_axis(p.var(x[0]), axis).unwrap();
                let sq = t.square(p.var(x[0]));
                let su = t.sum_over_axis(sq, axis).unwrap();
                let a = contract(t, m, &w);
                let b = contract(t, su, &w2);
                t.add(a, b).unwrap()
            }))
        });
    }
    suite(&mut out, "reshape_transpose", |r| {
        let (s, x) = inputs(r, &[&[2, 6]]);
        let w = uniform(&[4, 3], r);
        (s, Box::new(move |t, p| {
            let y = t.reshape(p.var(x[0]), &[3, 4]).unwrap();
            let y = t.transpose(y).unwrap();
            let y = t.square(y);
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "concat_slice_select", |r| {
        let (s, x) = inputs(r, &[&[3, 2], &[3, 4]]);
        let w = uniform(&[5, 3], r);
        (s, Box::new(move |t, p| {
            let c = t.concat_cols(p.var(x[0]), p.var(x[1])).unwrap();
            let sl = t.slice_cols(c, 1, 3).unwrap();
            let sel = t.select_rows(sl, &[2, 0, 0, 1, 2]).unwrap();
            let sel = t.square(sel);
            contract(t, sel, &w)
        }))
    });
    suite(&mut out, "squared_l2_distance", |r| {
        let (s, x) = inputs(r, &[&[7], &[7]]);
        (s, Box::new(move |t, p| t.squared_l2_distance(p.var(x[0]), p.var(x[1])).unwrap()))
    });
    out
}

pub fn convolution_and_pooling() -> Vec<GradResult> {
    let mut out = Vec::new();
    suite(&mut out, "im2col", |r| {
        let (s, x) = inputs(r, &[&[2, 4, 3, 2]]);
        let w = uniform(&[24, 18], r);
        (s, Box::new(move |t, p| {
            let y = t.im2col(p.var(x[0]), 3).unwrap();
            let y = t.square(y);
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "avg_pool2", |r| {
        let (s, x) = inputs(r, &[&[2, 5, 4, 3]]);
        let w = uniform(&[2, 2, 2, 3], r);
        (s, Box::new(move |t, p| {
            let y = t.avg_pool2(p.var(x[0])).unwrap();
            let y = t.square(y);
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "conv2d", |r| {
        let (mut s, x) = inputs(r, &[&[1, 4, 4, 2]]);
        let conv = Conv2d::new(&mut s, "conv", 3, 2, 3, r);
        *s.get_mut(conv.bias) = uniform(&[3], r);
        let w = uniform(&[1, 4, 4, 3], r);
        (s, Box::new(move |t, p| {
            let y = conv.forward(t, p, p.var(x[0])).unwrap();
            let y = t.relu(y);
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "backbone", |r| {
        let (mut s, x) = inputs(r, &[&[2, 4, 4, 3]]);
        let bb = Backbone::new(&mut s, &[2, 3], 4, r);
        for id in bb.params() {
            let shape = s.get(id).shape().to_vec();
            *s.get_mut(id) = uniform(&shape, r);
        }
        let w = uniform(&[2, 4], r);
        (s, Box::new(move |t, p| {
            let y = bb.forward(t, p, p.var(x[0])).unwrap();
            contract(t, y, &w)
        }))
    });
    out
}

fn edges_store(r: &mut Rng, n: usize, c: usize) -> (ParamStore, ParamId) {
    let (s, x) = inputs(r, &[&[n * n, c]]);
    (s, x[0])
}

pub fn graph_operations() -> Vec<GradResult> {
    let mut out = Vec::new();
    suite(&mut out, "node_pooling", |r| {
        let (s, e) = edges_store(r, 3, 4);
        let w = uniform(&[3, 3], r);
        (s, Box::new(move |t, p| {
            let y = node_pooling(t, p.var(e), 3).unwrap();
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "edge_pooling", |r| {
        let (s, e) = edges_store(r, 3, 4);
        let w = uniform(&[3, 4], r);
        (s, Box::new(move |t, p| {
            let y = edge_pooling(t, p.var(e), 3).unwrap();
            let y = t.square(y);
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "normalize_adjacency", |r| {
        let (mut s, x) = inputs(r, &[&[4, 4]]);
        for v in s.get_mut(x[0]).data_mut() {
            *v = v.abs();
        }
        let w = uniform(&[4, 4], r);
        (s, Box::new(move |t, p| {
            let y = normalize_adjacency_var(t, p.var(x[0])).unwrap();
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "init_edges", |r| {
        let (s, x) = inputs(r, &[&[3, 4]]);
        let w = uniform(&[9, 4], r);
        (s, Box::new(move |t, p| {
            let y = init_edges(t, p.var(x[0])).unwrap();
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "edge_gcn", |r| {
        let (mut s, x) = inputs(r, &[&[9, 4]]);
        let stack = GcnStack::new(&mut s, "eb", &[4, 4, 3], r);
        let w = uniform(&[9, 3], r);
        (s, Box::new(move |t, p| {
            let y = edge_gcn(t, p, &stack, p.var(x[0]), 3).unwrap();
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "dgr_builder", |r| {
        let (mut s, x) = inputs(r, &[&[3, 4]]);
        let b = DgrBuilder::new(&mut s, 4, 2, 2, 2, r);
        let (w1, w2) = (uniform(&[9, 2], r), uniform(&[3, 3], r));
        (s, Box::new(move |t, p| {
            let g = b.build(t, p, p.var(x[0])).unwrap();
            let a = contract(t, g.edges, &w1);
            let c = contract(t, g.node_adjacency, &w2);
            t.add(a, c).unwrap()
        }))
    });
    out
}

fn graph_vars(t: &mut Tape, p: &Bound, nodes: ParamId, edges: ParamId, n: usize) -> DgrVars {
    let node_adjacency = node_pooling(t, p.var(edges), n).unwrap();
    DgrVars {
        n,
        nodes: p.var(nodes),
        edges: p.var(edges),
        node_adjacency,
    }
}

pub fn heads_and_losses() -> Vec<GradResult> {
    let mut out = Vec::new();
    suite(&mut out, "tdn_code", |r| {
        let (mut s, x) = inputs(r, &[&[3, 4], &[9, 2]]);
        let tdn = GcnStack::new(&mut s, "tdn", &[4, 4, 3], r);
        let w = uniform(&[3], r);
        (s, Box::new(move |t, p| {
            let g = graph_vars(t, p, x[0], x[1], 3);
            let y = tdn_code(t, p, &tdn, &g).unwrap();
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "fpn_predict", |r| {
        let (mut s, x) = inputs(r, &[&[3, 4], &[9, 2]]);
        let hyper = Mlp::new(&mut s, "fpn", &[6, 5, 2], r);
        let eps = sample_epsilon(3, r);
        let (w1, w2) = (uniform(&[3], r), uniform(&[3], r));
        (s, Box::new(move |t, p| {
            let g = graph_vars(t, p, x[0], x[1], 3);
            let pred = fpn_predict(t, p, &hyper, &g, &eps).unwrap();
            let a = contract(t, pred.y, &w1);
            let b = contract(t, pred.sigma, &w2);
            t.add(a, b).unwrap()
        }))
    });
    suite(&mut out, "regression_score", |r| {
        let (mut s, x) = inputs(r, &[&[3, 4], &[9, 2]]);
        let head = Mlp::new(&mut s, "head", &[6, 5, 1], r);
        let w = uniform(&[3], r);
        (s, Box::new(move |t, p| {
            let g = graph_vars(t, p, x[0], x[1], 3);
            let y = regression_score(t, p, &head, &g, HeadInput::NodesAndEdges).unwrap();
            contract(t, y, &w)
        }))
    });
    suite(&mut out, "triplet_loss", |r| {
        let (s, x) = inputs(r, &[&[5], &[5], &[5]]);
        let margin = r.random_range(0.0..2.0);
        (s, Box::new(move |t, p| triplet_loss(t, p.var(x[0]), p.var(x[1]), p.var(x[2]), margin).unwrap()))
    });
    suite(&mut out, "level_loss", |r| {
        let (s, x) = inputs(r, &[&[6]]);
        let targets: Vec<f64> = (0..6).map(|_| r.random_range(1..=5) as f64).collect();
        (s, Box::new(move |t, p| level_loss(t, p.var(x[0]), &targets).unwrap()))
    });
    suite(&mut out, "score_loss", |r| {
        let (s, x) = inputs(r, &[&[6]]);
        let targets: Vec<f64> = (0..6).map(|_| r.random_range(1.0..5.0)).collect();
        (s, Box::new(move |t, p| score_loss(t, p.var(x[0]), &targets).unwrap()))
    });
    suite(&mut out, "combined_loss", |r| {
        let (s, x) = inputs(r, &[&[1], &[1]]);
        let lambda = r.random_range(0.0..1.0);
        (s, Box::new(move |t, p| {
            let a = t.square(p.var(x[0]));
            let b = t.square(p.var(x[1]));
            combined_loss_var(t, a, b, lambda).unwrap()
        }))
    });
    out
}

pub fn all() -> Vec<GradResult> {
    let mut v = elementwise_and_linear_algebra();
    v.extend(reductions_and_reshaping());
    v.extend(convolution_and_pooling());
    v.extend(graph_operations());
    v.extend(heads_and_losses());
    v
}
