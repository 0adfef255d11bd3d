//! Brute-force reference implementations and random comparisons against
//! the library versions.

use dgrlab_core::autodiff::Tape;
use dgrlab_core::dgr::{edge_pooling, node_pooling, normalize_adjacency};
use dgrlab_core::metrics::{clustering_metrics, plcc, srcc};
use dgrlab_core::rng::Rng;
use dgrlab_core::Tensor;
use rand::{Rng as _, SeedableRng};

pub const TRIALS: usize = 100;
pub const TOL: f64 = 1e-10;

/// Rank by counting: one plus the number of smaller values plus half the
/// number of other equal values.
pub fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, a)| {
            let smaller = x.iter().filter(|b| *b < a).count() as f64;
            let equal = x.iter().enumerate().filter(|(j, b)| *j != i && *b == a).count() as f64;
            1.0 + smaller + equal / 2.0
        })
        .collect()
}

/// Pearson correlation from pairwise differences, without means.
pub fn brute_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let (dx, dy) = (x[i] - x[j], y[i] - y[j]);
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn brute_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    brute_pearson(&brute_ranks(x), &brute_ranks(y))
}

/// Homogeneity, completeness and V-measure through mutual information:
/// `h = I(C;K)/H(C)`, `c = I(C;K)/H(K)`.
pub fn brute_clustering(classes: &[usize], clusters: &[usize]) -> (f64, f64, f64) {
    let n = classes.len() as f64;
    let cs: Vec<usize> = {
        let mut v = classes.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let ks: Vec<usize> = {
        let mut v = clusters.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let count = |f: &dyn Fn(usize) -> bool| (0..classes.len()).filter(|&i| f(i)).count() as f64;
    let mut h_c = 0.0;
    for &c in &cs {
        let p = count(&|i| classes[i] == c) / n;
        h_c -= p * p.ln();
    }
    let mut h_k = 0.0;
    for &k in &ks {
        let p = count(&|i| clusters[i] == k) / n;
        h_k -= p * p.ln();
    }
    let mut mi = 0.0;
    for &c in &cs {
        for &k in &ks {
            let pck = count(&|i| classes[i] == c && clusters[i] == k) / n;
            if pck > 0.0 {
                let pc = count(&|i| classes[i] == c) / n;
                let pk = count(&|i| clusters[i] == k) / n;
                mi += pck * (pck / (pc * pk)).ln();
            }
        }
    }
    let h = if h_c == 0.0 { 1.0 } else { mi / h_c };
    let c = if h_k == 0.0 { 1.0 } else { mi / h_k };
    let v = if h + c == 0.0 { 0.0 } else { 2.0 * h * c / (h + c) };
    (h, c, v)
}

/// `(A + I)_{ij} / √(d_i d_j)` with `d` the row sums of `A + I`.
pub fn brute_normalize(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let with = |i: usize, j: usize| a[i][j] + if i == j { 1.0 } else { 0.0 };
    let d: Vec<f64> = (0..n).map(|i| (0..n).map(|j| with(i, j)).sum()).collect();
    (0..n)
        .map(|i| (0..n).map(|j| with(i, j) / (d[i] * d[j]).sqrt()).collect())
        .collect()
}

/// `E'_i[c] = (1/N) Σ_j e_{i,j}[c]` over an `N×N×C` nested array.
pub fn brute_edge_pooling(e: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = e.len();
    let c = e[0][0].len();
    (0..n)
        .map(|i| (0..c).map(|k| (0..n).map(|j| e[i][j][k]).sum::<f64>() / n as f64).collect())
        .collect()
}

/// `|(m_{ij} + m_{ji}) / 2|` with `m_{ij}` the channel mean of `e_{i,j}`.
pub fn brute_node_pooling(e: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = e.len();
    let m = |i: usize, j: usize| e[i][j].iter().sum::<f64>() / e[i][j].len() as f64;
    (0..n)
        .map(|i| (0..n).map(|j| ((m(i, j) + m(j, i)) / 2.0).abs()).collect())
        .collect()
}

fn max_abs(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Ties are frequent when values come from a small integer range.
fn tied_vector(r: &mut Rng, n: usize) -> Vec<f64> {
    let range = r.random_range(2..6);
    (0..n).map(|_| r.random_range(0..range) as f64).collect()
}

fn real_vector(r: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-3.0..3.0)).collect()
}

/// Worst deviation between [`srcc`] and the brute force over random tied
/// and untied inputs; degenerate verdicts must agree too.
pub fn srcc_discrepancy(seed: u64) -> f64 {
    let mut r = Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..TRIALS {
        let n = r.random_range(2..12);
        let (x, y) = if t % 2 == 0 {
            (tied_vector(&mut r, n), tied_vector(&mut r, n))
        } else {
            (real_vector(&mut r, n), real_vector(&mut r, n))
        };
        match (srcc(&x, &y).ok(), brute_spearman(&x, &y)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => return f64::INFINITY,
        }
    }
    worst
}

pub fn plcc_discrepancy(seed: u64) -> f64 {
    let mut r = Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let n = r.random_range(2..12);
        let x = real_vector(&mut r, n);
        let y: Vec<f64> = x.iter().map(|v| v * r.random_range(-1.0..1.0) + r.random_range(-1.0..1.0)).collect();
        match (plcc(&x, &y).ok(), brute_pearson(&x, &y)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => return f64::INFINITY,
        }
    }
    worst
}

pub fn clustering_discrepancy(seed: u64) -> f64 {
    let mut r = Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let n = r.random_range(1..30);
        let kc = r.random_range(1..5);
        let kk = r.random_range(1..5);
        let classes: Vec<usize> = (0..n).map(|_| r.random_range(0..kc)).collect();
        let clusters: Vec<usize> = (0..n).map(|_| r.random_range(0..kk)).collect();
        let s = clustering_metrics(&classes, &clusters).unwrap();
        let (h, c, v) = brute_clustering(&classes, &clusters);
        worst = worst.max(max_abs([s.homogeneity, s.completeness, s.v_measure], [h, c, v]));
    }
    worst
}

pub fn normalize_discrepancy(seed: u64) -> f64 {
    let mut r = Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let n = r.random_range(1..7);
        let a: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| r.random_range(0.0..2.0)).collect())
            .collect();
        let t = Tensor::new(vec![n, n], a.concat()).unwrap();
        let got = normalize_adjacency(&t).unwrap();
        worst = worst.max(max_abs(got.data().iter().copied(), brute_normalize(&a).concat()));
    }
    worst
}

fn random_edges(r: &mut Rng) -> (usize, Vec<Vec<Vec<f64>>>, Tensor) {
    let n = r.random_range(1..6);
    let c = r.random_range(1..5);
    let e: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| (0..n).map(|_| (0..c).map(|_| r.random_range(-2.0..2.0)).collect()).collect())
        .collect();
    let flat: Vec<f64> = e.iter().flatten().flatten().copied().collect();
    (n, e, Tensor::new(vec![n * n, c], flat).unwrap())
}

pub fn edge_pooling_discrepancy(seed: u64) -> f64 {
    let mut r = Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (n, e, t) = random_edges(&mut r);
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = edge_pooling(&mut tape, v, n).unwrap();
        worst = worst.max(max_abs(tape.value(out).data().iter().copied(), brute_edge_pooling(&e).concat()));
    }
    worst
}

pub fn node_pooling_discrepancy(seed: u64) -> f64 {
    let mut r = Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (n, e, t) = random_edges(&mut r);
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = node_pooling(&mut tape, v, n).unwrap();
        worst = worst.max(max_abs(tape.value(out).data().iter().copied(), brute_node_pooling(&e).concat()));
    }
    worst
}

/// Every algebraic oracle as `(name, worst deviation)`.
pub fn all(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("srcc", srcc_discrepancy(seed)),
        ("plcc", plcc_discrepancy(seed)),
        ("clustering_metrics", clustering_discrepancy(seed)),
        ("normalize_adjacency", normalize_discrepancy(seed)),
        ("edge_pooling", edge_pooling_discrepancy(seed)),
        ("node_pooling", node_pooling_discrepancy(seed)),
    ]
}
