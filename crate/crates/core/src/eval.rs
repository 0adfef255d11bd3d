//! Scoring, held-out evaluation and the report it produces.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::heads::{fpn_predict, regression_score, tdn_code};
use crate::metrics::{clustering_metrics, kmeans, plcc, srcc, MetricError};
use crate::model::DgrModel;
use crate::rng::{self, salt, Rng};
use crate::synth::{Family, Patch, SeedSpace, Synth, SynthError, LEVELS};
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("image is {height}×{width}, smaller than the {patch}×{patch} patch")]
    ImageTooSmall { height: usize, width: usize, patch: usize },
    #[error("at least one crop is required")]
    NoCrops,
    #[error("empty held-out set")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Runs independent jobs `0..n` and returns their results in index order.
pub trait Executor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

/// Evaluation protocol settings. Evaluation draws from its own seed so the
/// held-out set does not depend on how long training ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    /// Held-out images scored against their proxy MOS.
    pub heldout_samples: usize,
    /// Side of each held-out image; crops are taken at the patch size.
    pub image_size: usize,
    pub crops: usize,
    /// Graphs per type pooled for clustering and level ranking.
    pub graphs_per_type: usize,
    pub kmeans_restarts: usize,
    /// Fresh triplets for the code accuracy; 0 skips it.
    pub triplets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            heldout_samples: 200,
            image_size: 40,
            crops: 10,
            graphs_per_type: 10,
            kmeans_restarts: 10,
            triplets: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeReport {
    pub type_id: usize,
    pub family: Family,
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
    /// Spearman between the predicted level mean and the true level; `None`
    /// when the predictions are constant.
    pub level_srcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    /// `None` marks a degenerate (constant) prediction vector.
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub triplet_accuracy: Option<f64>,
    pub per_type: Vec<TypeReport>,
}

fn in_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

fn in_corr(x: Option<f64>) -> bool {
    x.is_none_or(|v| (-1.0..=1.0).contains(&v))
}

impl EvalReport {
    /// Whether every field lies in its declared range.
    pub fn in_range(&self) -> bool {
        in_corr(self.srcc)
            && in_corr(self.plcc)
            && self.triplet_accuracy.is_none_or(in_unit)
            && self.per_type.iter().all(|t| {
                in_unit(t.homogeneity) && in_unit(t.completeness) && in_unit(t.v_measure) && in_corr(t.level_srcc)
            })
    }

    /// Mean level Spearman over the types where it is defined.
    pub fn mean_level_srcc(&self) -> Option<f64> {
        let v: Vec<f64> = self.per_type.iter().filter_map(|t| t.level_srcc).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean V-measure over the given families.
    pub fn mean_v_measure(&self, families: &[Family]) -> Option<f64> {
        let v: Vec<f64> = self
            .per_type
            .iter()
            .filter(|t| families.contains(&t.family))
            .map(|t| t.v_measure)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn degenerate_as_none(r: Result<f64, MetricError>) -> Result<Option<f64>, EvalError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::Degenerate) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Per-node scores of one graph built from `patches`.
pub fn score_patches(model: &DgrModel, patches: &[Patch]) -> Result<Vec<f64>, EvalError> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let g = model.dgr(&mut tape, &p, patches)?;
    let s = regression_score(&mut tape, &p, &model.head, &g, model.config.head_input)?;
    Ok(tape.value(s).data().to_vec())
}

/// Mean score over `crops` uniformly placed `patch × patch` crops of
/// `image`, scored together as one graph.
pub fn infer_score(model: &DgrModel, image: &Patch, patch: usize, crops: usize, r: &mut Rng) -> Result<f64, EvalError> {
    if crops == 0 {
        return Err(EvalError::NoCrops);
    }
    if image.height < patch || image.width < patch {
        return Err(EvalError::ImageTooSmall {
            height: image.height,
            width: image.width,
            patch,
        });
    }
    let batch: Vec<Patch> = (0..crops)
        .map(|_| {
            let y = r.random_range(0..=image.height - patch);
            let x = r.random_range(0..=image.width - patch);
            image.crop(y, x, patch, patch)
        })
        .collect();
    let scores = score_patches(model, &batch)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn job_rng(seed: u64, tag: u64, index: usize) -> Rng {
    rng::stream(rng::derive(seed, tag) ^ index as u64, salt::EVAL)
}

/// Fraction of fresh held-out triplets whose anchor code is strictly closer
/// to the positive code than to the negative one.
pub fn triplet_accuracy(
    model: &DgrModel,
    synth: &Synth,
    graph_size: usize,
    n: usize,
    seed: u64,
    exec: &impl Executor,
) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let hits = exec.map(n, |i| -> Result<bool, EvalError> {
        let mut r = job_rng(seed, 1, i);
        let t = synth.sample_triplet(graph_size, SeedSpace::HeldOut, &mut r)?;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let mut codes = Vec::with_capacity(3);
        for batch in [&t.anchor, &t.positive, &t.negative] {
            let g = model.dgr(&mut tape, &p, batch.iter().map(|s| &s.patch))?;
            let c = tdn_code(&mut tape, &p, &model.tdn, &g)?;
            codes.push(tape.value(c).data().to_vec());
        }
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        Ok(d(&codes[0], &codes[1]) < d(&codes[0], &codes[2]))
    });
    let mut count = 0usize;
    for h in hits {
        count += usize::from(h?);
    }
    Ok(count as f64 / n as f64)
}

/// Node embeddings, predicted level means and true levels of one type,
/// pooled over `graphs` held-out graphs.
struct TypeDraw {
    nodes: Vec<f64>,
    mu: Vec<f64>,
    levels: Vec<usize>,
}

fn draw_type(
    model: &DgrModel,
    synth: &Synth,
    type_id: usize,
    graph_size: usize,
    graphs: usize,
    r: &mut Rng,
) -> Result<TypeDraw, EvalError> {
    let mut out = TypeDraw {
        nodes: Vec::new(),
        mu: Vec::new(),
        levels: Vec::new(),
    };
    for _ in 0..graphs {
        let batch = synth.sample_type_batch(type_id, graph_size, SeedSpace::HeldOut, r)?;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let g = model.dgr(&mut tape, &p, batch.iter().map(|s| &s.patch))?;
        let pred = fpn_predict(&mut tape, &p, &model.fpn, &g, &vec![0.0; graph_size])?;
        out.nodes.extend_from_slice(tape.value(g.nodes).data());
        out.mu.extend_from_slice(tape.value(pred.mu).data());
        out.levels.extend(batch.iter().map(|s| usize::from(s.level)));
    }
    Ok(out)
}

/// Per-type clustering of node embeddings against level labels (k-means
/// with one cluster per level) and level ranking by the predicted mean.
pub fn type_reports(
    model: &DgrModel,
    synth: &Synth,
    graph_size: usize,
    cfg: &EvalConfig,
    exec: &impl Executor,
) -> Result<Vec<TypeReport>, EvalError> {
    let dim = model.config.feature_dim;
    let reports = exec.map(synth.num_types(), |t| -> Result<TypeReport, EvalError> {
        let mut r = job_rng(cfg.seed, 2, t);
        let d = draw_type(model, synth, t, graph_size, cfg.graphs_per_type.max(1), &mut r)?;
        let km = kmeans(&d.nodes, dim, LEVELS, cfg.kmeans_restarts.max(1), &mut r)?;
        let scores = clustering_metrics(&d.levels, &km.labels)?;
        let levels: Vec<f64> = d.levels.iter().map(|l| *l as f64).collect();
        Ok(TypeReport {
            type_id: t,
            family: synth.spec(t)?.family,
            homogeneity: scores.homogeneity,
            completeness: scores.completeness,
            v_measure: scores.v_measure,
            level_srcc: degenerate_as_none(srcc(&d.mu, &levels))?,
        })
    });
    reports.into_iter().collect()
}

/// Scores of the held-out images and their proxy MOS.
pub fn heldout_scores(
    model: &DgrModel,
    synth: &Synth,
    cfg: &EvalConfig,
    exec: &impl Executor,
) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    if cfg.heldout_samples == 0 {
        return Err(EvalError::Empty);
    }
    let mut r = job_rng(cfg.seed, 3, 0);
    let set = synth.sample_mixed_sized(cfg.heldout_samples, cfg.image_size, SeedSpace::HeldOut, &mut r)?;
    let preds = exec.map(set.len(), |i| {
        let mut r = job_rng(cfg.seed, 4, i);
        infer_score(model, &set[i].patch, synth.patch_size(), cfg.crops, &mut r)
    });
    let preds = preds.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok((preds, set.iter().map(|s| s.proxy_mos).collect()))
}

/// Full evaluation: held-out SRCC/PLCC, triplet accuracy and per-type
/// clustering and level ranking.
pub fn evaluate(
    model: &DgrModel,
    synth: &Synth,
    graph_size: usize,
    cfg: &EvalConfig,
    step: usize,
    exec: &impl Executor,
) -> Result<EvalReport, EvalError> {
    let (pred, gt) = heldout_scores(model, synth, cfg, exec)?;
    let triplet_accuracy = match cfg.triplets {
        0 => None,
        n => Some(triplet_accuracy(model, synth, graph_size, n, cfg.seed, exec)?),
    };
    Ok(EvalReport {
        step,
        srcc: degenerate_as_none(srcc(&pred, &gt))?,
        plcc: degenerate_as_none(plcc(&pred, &gt))?,
        triplet_accuracy,
        per_type: type_reports(model, synth, graph_size, cfg, exec)?,
    })
}
