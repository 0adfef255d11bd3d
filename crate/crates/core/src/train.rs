//! Pretraining and finetuning loops.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::heads::{
    combined_loss_var, fpn_predict, level_loss, regression_score, sample_epsilon, score_loss, tdn_code,
    triplet_loss, HeadError, LossBundle,
};
use crate::model::{DgrModel, ModelConfig, ModelError};
use crate::nn::ParamId;
use crate::optim::{Adam, AdamConfig, OptimError};
use crate::rng::{self, salt, Rng};
use crate::synth::{DistortionSample, Family, SeedSpace, Synth, SynthError};
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(&'static str),
    #[error("non-finite loss at step {step}: l_dist={l_dist}, l_level={l_level}, total={total}")]
    NonFiniteLoss {
        step: usize,
        l_dist: f64,
        l_level: f64,
        total: f64,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything a run needs besides the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub types: Vec<Family>,
    pub patch_size: usize,
    /// Samples per graph.
    pub graph_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub lambda: f64,
    pub margin: f64,
    /// Steps between periodic evaluations during pretraining; 0 disables them.
    pub eval_every: usize,
    pub finetune_schedule: Schedule,
}

/// Learning-rate schedule over a run of `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Half-cosine from the base rate down to 5% of it.
    Cosine,
}

impl Schedule {
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let frac = (step as f64 / total.max(1) as f64).min(1.0);
                let floor = 0.05 * base;
                floor + (base - floor) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            types: Family::ALL.to_vec(),
            patch_size: 32,
            graph_size: 10,
            pretrain_steps: 2000,
            finetune_steps: 500,
            pretrain_lr: 2e-3,
            finetune_lr: 2e-3,
            lambda: 0.25,
            margin: 0.1,
            eval_every: 0,
            finetune_schedule: Schedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.pretrain_lr > 0.0 && self.finetune_lr > 0.0) {
            return Err(TrainError::Config("learning rates must be positive"));
        }
        if self.pretrain_steps == 0 || self.finetune_steps == 0 {
            return Err(TrainError::Config("step counts must be positive"));
        }
        if self.graph_size < 2 {
            return Err(TrainError::Config("graph_size must be at least 2"));
        }
        if self.types.len() < 2 {
            return Err(TrainError::Config("at least two distortion types are needed"));
        }
        if !(self.lambda >= 0.0 && self.margin >= 0.0) {
            return Err(TrainError::Config("lambda and margin must be nonnegative"));
        }
        Ok(())
    }

    pub fn synth(&self) -> Result<Synth, TrainError> {
        Ok(Synth::standard(&self.types, self.patch_size)?)
    }
}

fn check_finite(step: usize, b: &LossBundle) -> Result<(), TrainError> {
    if b.total.is_finite() && b.l_dist.is_finite() && b.l_level.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss {
            step,
            l_dist: b.l_dist,
            l_level: b.l_level,
            total: b.total,
        })
    }
}

/// One pretraining step: three graphs through shared weights, the triplet
/// loss on their type codes, the level loss on the anchor graph, and one
/// Adam update over `params`.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    model: &mut DgrModel,
    synth: &Synth,
    cfg: &TrainConfig,
    r: &mut Rng,
    opt: &mut Adam,
    params: &[ParamId],
    step: usize,
) -> Result<LossBundle, TrainError> {
    let triplet = synth.sample_triplet(cfg.graph_size, SeedSpace::Train, r)?;
    let epsilon = sample_epsilon(cfg.graph_size, r);
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, true);
    let mut codes = Vec::with_capacity(3);
    let mut anchor = None;
    for batch in [&triplet.anchor, &triplet.positive, &triplet.negative] {
        let g = model.dgr(&mut tape, &p, batch.iter().map(|s| &s.patch))?;
        codes.push(tdn_code(&mut tape, &p, &model.tdn, &g)?);
        anchor.get_or_insert(g);
    }
    let anchor = anchor.expect("three graphs were built");
    let l_dist = triplet_loss(&mut tape, codes[0], codes[1], codes[2], cfg.margin)?;
    let pred = fpn_predict(&mut tape, &p, &model.fpn, &anchor, &epsilon)?;
    let levels: Vec<f64> = triplet.anchor.iter().map(|s| f64::from(s.level)).collect();
    let l_level = level_loss(&mut tape, pred.y, &levels)?;
    let total = combined_loss_var(&mut tape, l_dist, l_level, cfg.lambda)?;
    let bundle = LossBundle {
        l_dist: tape.value(l_dist).data()[0],
        l_level: tape.value(l_level).data()[0],
        lambda: cfg.lambda,
        total: tape.value(total).data()[0],
    };
    check_finite(step, &bundle)?;
    let grads = p.collect(&tape.backward(total)?)?;
    opt.step(&mut model.store, &grads, params)?;
    Ok(bundle)
}

/// One finetuning step on a labeled batch: graph, per-node scores, mean
/// squared error against the proxy scores, one Adam update over `params`.
pub fn finetune_step(
    model: &mut DgrModel,
    batch: &[DistortionSample],
    opt: &mut Adam,
    params: &[ParamId],
    step: usize,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, true);
    let g = model.dgr(&mut tape, &p, batch.iter().map(|s| &s.patch))?;
    let pred = regression_score(&mut tape, &p, &model.head, &g, model.config.head_input)?;
    let gt: Vec<f64> = batch.iter().map(|s| s.proxy_mos).collect();
    let loss = score_loss(&mut tape, pred, &gt)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            l_dist: f64::NAN,
            l_level: f64::NAN,
            total: value,
        });
    }
    let grads = p.collect(&tape.backward(loss)?)?;
    opt.step(&mut model.store, &grads, params)?;
    Ok(value)
}

/// Stateful pretraining run: model, optimizer and sampling stream.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub model: DgrModel,
    pub synth: Synth,
    pub cfg: TrainConfig,
    opt: Adam,
    rng: Rng,
    params: Vec<ParamId>,
    step: usize,
}

impl Pretrainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = DgrModel::new(model_cfg, cfg.seed)?;
        let synth = cfg.synth()?;
        let opt = Adam::new(&model.store, AdamConfig::with_lr(cfg.pretrain_lr))?;
        let params = model.pretrain_params();
        Ok(Self {
            rng: rng::stream(cfg.seed, salt::PRETRAIN),
            model,
            synth,
            cfg,
            opt,
            params,
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn step(&mut self) -> Result<LossBundle, TrainError> {
        let b = pretrain_step(
            &mut self.model,
            &self.synth,
            &self.cfg,
            &mut self.rng,
            &mut self.opt,
            &self.params,
            self.step,
        )?;
        self.step += 1;
        Ok(b)
    }
}

/// Which parameters a finetuning run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneScope {
    /// Backbone, graph builder and score regressor.
    Full,
    /// Only the score regressor; the representation stays frozen.
    HeadOnly,
}

/// Stateful finetuning run.
#[derive(Debug, Clone)]
pub struct Finetuner {
    pub model: DgrModel,
    pub synth: Synth,
    pub cfg: TrainConfig,
    opt: Adam,
    rng: Rng,
    params: Vec<ParamId>,
    step: usize,
}

impl Finetuner {
    pub fn new(model: DgrModel, cfg: TrainConfig, scope: FinetuneScope) -> Result<Self, TrainError> {
        cfg.validate()?;
        let synth = cfg.synth()?;
        let opt = Adam::new(&model.store, AdamConfig::with_lr(cfg.finetune_lr))?;
        let params = match scope {
            FinetuneScope::Full => model.finetune_params(),
            FinetuneScope::HeadOnly => model.head_params(),
        };
        Ok(Self {
            rng: rng::stream(cfg.seed, salt::FINETUNE),
            model,
            synth,
            cfg,
            opt,
            params,
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// One step on a fresh mixed-type training batch.
    pub fn step(&mut self) -> Result<f64, TrainError> {
        let lr = self
            .cfg
            .finetune_schedule
            .lr(self.cfg.finetune_lr, self.step, self.cfg.finetune_steps);
        self.opt.set_lr(lr)?;
        let batch = self
            .synth
            .sample_mixed_batch(self.cfg.graph_size, SeedSpace::Train, &mut self.rng)?;
        let loss = finetune_step(&mut self.model, &batch, &mut self.opt, &self.params, self.step)?;
        self.step += 1;
        Ok(loss)
    }
}
