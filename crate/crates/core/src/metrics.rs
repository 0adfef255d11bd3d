//! Correlation and clustering metrics, and the k-means used to cluster node
//! embeddings.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    /// A correlation with a constant argument is undefined.
    #[error("degenerate input: correlation undefined for a constant vector")]
    Degenerate,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("non-finite input")]
    NonFinite,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Length(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricError::TooFew {
            needed: 2,
            got: a.len(),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Pearson's linear correlation coefficient.
pub fn plcc(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gt.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let (dp, dg) = (p - mp, g - mg);
        sxy += dp * dg;
        sxx += dp * dp;
        syy += dg * dg;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Degenerate);
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn srcc(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    plcc(&average_ranks(pred), &average_ranks(gt))
}

/// Homogeneity, completeness and their harmonic mean (V-measure).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusteringScores {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, total: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * libm::log(p)
        })
        .sum()
}

/// Entropy-based clustering scores of `clusters` against ground-truth
/// `classes`. By convention a zero-entropy reference gives a score of 1.
pub fn clustering_metrics(classes: &[usize], clusters: &[usize]) -> Result<ClusteringScores, MetricError> {
    if classes.len() != clusters.len() {
        return Err(MetricError::Length(classes.len(), clusters.len()));
    }
    if classes.is_empty() {
        return Err(MetricError::TooFew { needed: 1, got: 0 });
    }
    let total = classes.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut class_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cluster_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (&c, &k) in classes.iter().zip(clusters) {
        *joint.entry((c, k)).or_default() += 1;
        *class_counts.entry(c).or_default() += 1;
        *cluster_counts.entry(k).or_default() += 1;
    }
    let h_class = entropy(class_counts.values().copied(), total);
    let h_cluster = entropy(cluster_counts.values().copied(), total);
    // H(C|K) = −Σ n_ck/N · ln(n_ck / n_k), and symmetrically for H(K|C)
    let mut h_class_given_cluster = 0.0;
    let mut h_cluster_given_class = 0.0;
    for (&(c, k), &n) in &joint {
        let n = n as f64;
        h_class_given_cluster -= n / total * libm::log(n / cluster_counts[&k] as f64);
        h_cluster_given_class -= n / total * libm::log(n / class_counts[&c] as f64);
    }
    let homogeneity = if h_class == 0.0 {
        1.0
    } else {
        1.0 - h_class_given_cluster / h_class
    };
    let completeness = if h_cluster == 0.0 {
        1.0
    } else {
        1.0 - h_cluster_given_class / h_cluster
    };
    let homogeneity = homogeneity.clamp(0.0, 1.0);
    let completeness = completeness.clamp(0.0, 1.0);
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(ClusteringScores {
        homogeneity,
        completeness,
        v_measure,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of [`kmeans`]: a cluster id per point and the final inertia.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub inertia: f64,
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// inertia wins. `points` are rows of width `dim`.
pub fn kmeans(points: &[f64], dim: usize, k: usize, restarts: usize, rng: &mut Rng) -> Result<KMeans, MetricError> {
    let n = points.len() / dim.max(1);
    if dim == 0 || n * dim != points.len() {
        return Err(MetricError::Length(points.len(), dim));
    }
    if n < k || k == 0 {
        return Err(MetricError::TooFew { needed: k.max(1), got: n });
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        // k-means++ seeding
        let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
        centers.extend_from_slice(row(rng.random_range(0..n)));
        let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[..dim])).collect();
        for _ in 1..k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut idx = n - 1;
                for (i, d) in d2.iter().enumerate() {
                    if u < *d {
                        idx = i;
                        break;
                    }
                    u -= d;
                }
                idx
            } else {
                rng.random_range(0..n)
            };
            centers.extend_from_slice(row(pick));
            let c = centers.len() / dim - 1;
            for i in 0..n {
                let d = sq_dist(row(i), &centers[c * dim..(c + 1) * dim]);
                if d < d2[i] {
                    d2[i] = d;
                }
            }
        }

        let mut labels = vec![0usize; n];
        let mut inertia = f64::INFINITY;
        for _ in 0..300 {
            let mut changed = false;
            let mut new_inertia = 0.0;
            for i in 0..n {
                let (mut bl, mut bd) = (0, f64::INFINITY);
                for c in 0..k {
                    let d = sq_dist(row(i), &centers[c * dim..(c + 1) * dim]);
                    if d < bd {
                        bl = c;
                        bd = d;
                    }
                }
                if labels[i] != bl {
                    labels[i] = bl;
                    changed = true;
                }
                new_inertia += bd;
            }
            inertia = new_inertia;
            let mut sums = vec![0.0; k * dim];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                counts[labels[i]] += 1;
                for (s, v) in sums[labels[i] * dim..(labels[i] + 1) * dim].iter_mut().zip(row(i)) {
                    *s += v;
                }
            }
            for c in 0..k {
                // an emptied cluster keeps its previous center
                if counts[c] > 0 {
                    for j in 0..dim {
                        centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeans { labels, inertia });
        }
    }
    Ok(best.expect("at least one restart"))
}
