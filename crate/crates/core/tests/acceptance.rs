//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any of them fails.
//!
//! The training criteria share one set of runs: five pretraining seeds, each
//! finetuned three ways (pretrained, random init, edges-only head), plus a
//! second run of seed 0 for the determinism check.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{gradcheck, oracles};
use dgrlab_core::autodiff::Tape;
use dgrlab_core::eval::{evaluate, heldout_scores, EvalConfig, EvalReport, Sequential};
use dgrlab_core::heads::{reparameterize, sample_epsilon, triplet_loss, HeadInput};
use dgrlab_core::metrics::{plcc, srcc};
use dgrlab_core::model::{DgrModel, LoadMode, ModelConfig};
use dgrlab_core::rng;
use dgrlab_core::synth::{Family, Synth};
use dgrlab_core::train::{FinetuneScope, Finetuner, Pretrainer, TrainConfig};
use dgrlab_core::Tensor;
use rand::{Rng as _, SeedableRng};

const SEEDS: u64 = 5;
const STRONG: [Family; 3] = [Family::Blur, Family::AdditiveNoise, Family::Pixelate];

struct Verdicts {
    failed: Vec<&'static str>,
}

impl Verdicts {
    fn line(&mut self, name: &'static str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(name);
        }
    }
}

fn gradient_suite(v: &mut Verdicts) {
    let start = Instant::now();
    let results = gradcheck::all();
    let secs = start.elapsed().as_secs_f64();
    let bad: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({} instances, worst {:.2e})", r.label, r.instances, r.worst))
        .collect();
    let worst = results.iter().map(|r| r.worst).fold(0.0, f64::max);
    let fewest = results.iter().map(|r| r.instances).min().unwrap_or(0);
    v.line(
        "gradient suite",
        bad.is_empty() && secs < 120.0,
        format!(
            "{} operations, at least {fewest} instances each, worst relative error {worst:.2e} (< {:.0e}), {secs:.1}s (< 120s){}",
            results.len(),
            gradcheck::TOL,
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(", ")) }
        ),
    );
}

fn algebraic_oracles(v: &mut Verdicts) {
    let results = oracles::all(2024);
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let listed: Vec<String> = results.iter().map(|(n, d)| format!("{n} {d:.1e}")).collect();
    v.line(
        "algebraic oracles",
        worst <= oracles::TOL,
        format!("{} random inputs each, max deviation {worst:.1e} (<= 1e-10): {}", oracles::TRIALS, listed.join(", ")),
    );
}

fn reparameterization(v: &mut Verdicts) {
    let n = 100_000;
    let mut r = rng::stream(17, rng::salt::EVAL);
    let eps = sample_epsilon(n, &mut r);
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::filled(&[n], 2.0));
    let sigma = tape.constant(Tensor::filled(&[n], 0.5));
    let y = reparameterize(&mut tape, mu, sigma, &eps).unwrap();
    let d = tape.value(y).data();
    let mean = d.iter().sum::<f64>() / n as f64;
    let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    v.line(
        "reparameterization statistics",
        (mean - 2.0).abs() <= 0.007 && (0.49..=0.51).contains(&std),
        format!("{n} draws at mu=2 sigma=0.5: mean {mean:.5}, std {std:.5}"),
    );
}

/// Coordinates on a 1/1024 grid so every difference, square and sum below is
/// exact in binary floating point.
fn dyadic(r: &mut rng::Rng, dim: usize, range: i64) -> Vec<f64> {
    (0..dim).map(|_| r.random_range(-range..=range) as f64 / 1024.0).collect()
}

fn triplet_properties(v: &mut Verdicts) {
    let mut r = rng::Rng::seed_from_u64(31);
    let loss = |a: &[f64], p: &[f64], n: &[f64], margin: f64| {
        let mut tape = Tape::new();
        let mut mk = |x: &[f64]| tape.constant(Tensor::new(vec![1, x.len()], x.to_vec()).unwrap());
        let (va, vp, vn) = (mk(a), mk(p), mk(n));
        let l = triplet_loss(&mut tape, va, vp, vn, margin).unwrap();
        tape.value(l).data()[0]
    };
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, w)| (u - w) * (u - w)).sum::<f64>();
    let (mut zero_cases, mut violations) = (0usize, 0usize);
    for i in 0..1000 {
        let dim = r.random_range(1..=8);
        let margin = r.random_range(0..=256) as f64 / 1024.0;
        let a = dyadic(&mut r, dim, 2048);
        let p = dyadic(&mut r, dim, 2048);
        let mut n = dyadic(&mut r, dim, 2048);
        if i % 2 == 0 {
            // Push the negative out until it sits in the zero region.
            while sq(&a, &n) < sq(&a, &p) + margin {
                for (x, c) in n.iter_mut().zip(&a) {
                    *x = c + 2.0 * (*x - c) + 1.0;
                }
            }
        }
        let l = loss(&a, &p, &n, margin);
        let expected = (sq(&a, &p) - sq(&a, &n) + margin).max(0.0);
        if sq(&a, &n) >= sq(&a, &p) + margin {
            zero_cases += 1;
            violations += usize::from(l != 0.0);
        }
        violations += usize::from(l != expected);
        let t = dyadic(&mut r, dim, 8192);
        let shift = |x: &[f64]| x.iter().zip(&t).map(|(u, w)| u + w).collect::<Vec<_>>();
        violations += usize::from(loss(&shift(&a), &shift(&p), &shift(&n), margin) != l);
    }
    v.line(
        "triplet properties",
        violations == 0 && zero_cases >= 500,
        format!("1000 triplets, {zero_cases} in the zero region, {violations} violations of zero-region or translation invariance"),
    );
}

struct Run {
    pretrained: DgrModel,
    pretrain_secs: f64,
    pretrained_bytes: Vec<u8>,
    finetuned_bytes: Vec<u8>,
    finetune_srcc: f64,
    finetune_plcc: f64,
    random_srcc: f64,
    edges_only_srcc: f64,
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

fn finetune(model: DgrModel, seed: u64) -> DgrModel {
    let cfg = train_config(seed);
    let steps = cfg.finetune_steps;
    let mut ft = Finetuner::new(model, cfg, FinetuneScope::Full).unwrap();
    for _ in 0..steps {
        ft.step().unwrap();
    }
    ft.model
}

fn heldout(model: &DgrModel, synth: &Synth) -> (f64, f64) {
    let (pred, gt) = heldout_scores(model, synth, &EvalConfig::default(), &Sequential).unwrap();
    (srcc(&pred, &gt).unwrap_or(f64::NAN), plcc(&pred, &gt).unwrap_or(f64::NAN))
}

fn pretrain(seed: u64) -> (DgrModel, f64) {
    let start = Instant::now();
    let cfg = train_config(seed);
    let steps = cfg.pretrain_steps;
    let mut p = Pretrainer::new(ModelConfig::default(), cfg).unwrap();
    for _ in 0..steps {
        p.step().unwrap();
    }
    (p.model, start.elapsed().as_secs_f64())
}

fn run(seed: u64, synth: &Synth) -> Run {
    let (pretrained, pretrain_secs) = pretrain(seed);
    let pretrained_bytes = pretrained.to_bytes();
    let load = |cfg: ModelConfig| DgrModel::load(cfg, &pretrained_bytes, LoadMode::Representation, seed).unwrap();

    let tuned = finetune(load(ModelConfig::default()), seed);
    let (finetune_srcc, finetune_plcc) = heldout(&tuned, synth);
    let random = finetune(DgrModel::new(ModelConfig::default(), seed).unwrap(), seed);
    let edges_cfg = ModelConfig {
        head_input: HeadInput::EdgesOnly,
        ..ModelConfig::default()
    };
    let edges_only = finetune(load(edges_cfg), seed);
    let run = Run {
        finetuned_bytes: tuned.to_bytes(),
        pretrained,
        pretrain_secs,
        pretrained_bytes,
        finetune_srcc,
        finetune_plcc,
        random_srcc: heldout(&random, synth).0,
        edges_only_srcc: heldout(&edges_only, synth).0,
    };
    eprintln!(
        "seed {seed}: pretrained {:.4}, random {:.4}, edges-only {:.4} ({:.0}s pretraining)",
        run.finetune_srcc, run.random_srcc, run.edges_only_srcc, run.pretrain_secs
    );
    run
}

/// Mean squared feature distance of level-1 vs level-5 noise patches and of
/// level-1 vs level-1 patches, over pairs of distinct held-out contents.
fn noise_level_distances(model: &DgrModel, synth: &Synth) -> (f64, f64) {
    let noise = synth.specs().iter().find(|s| s.family == Family::AdditiveNoise).unwrap().type_id;
    let pairs = 50u64;
    let held = |i: u64| (1u64 << 63) | rng::derive(99, i);
    let features = |seeds: &[(u64, u8)]| {
        let patches: Vec<_> = seeds.iter().map(|&(s, l)| synth.sample(noise, l, s).unwrap().patch).collect();
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let f = model.features(&mut tape, &p, &patches).unwrap();
        tape.value(f).clone()
    };
    let (mut far, mut near) = (0.0, 0.0);
    for i in 0..pairs {
        let (a, b) = (held(2 * i), held(2 * i + 1));
        let f = features(&[(a, 1), (b, 5), (b, 1)]);
        let d = |x: usize, y: usize| f.row(x).iter().zip(f.row(y)).map(|(u, w)| (u - w).powi(2)).sum::<f64>();
        far += d(0, 1);
        near += d(0, 2);
    }
    (far / pairs as f64, near / pairs as f64)
}

fn report_distance(a: &EvalReport, b: &EvalReport) -> f64 {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    if a.step != b.step || a.per_type.len() != b.per_type.len() {
        return f64::INFINITY;
    }
    let mut d = opt(a.srcc, b.srcc).max(opt(a.plcc, b.plcc)).max(opt(a.triplet_accuracy, b.triplet_accuracy));
    for (x, y) in a.per_type.iter().zip(&b.per_type) {
        if x.type_id != y.type_id || x.family != y.family {
            return f64::INFINITY;
        }
        d = d
            .max((x.homogeneity - y.homogeneity).abs())
            .max((x.completeness - y.completeness).abs())
            .max((x.v_measure - y.v_measure).abs())
            .max(opt(x.level_srcc, y.level_srcc));
    }
    d
}

fn training_criteria(v: &mut Verdicts) {
    let synth = train_config(0).synth().unwrap();
    let eval_cfg = EvalConfig::default();
    let runs: Vec<Run> = (0..SEEDS).map(|s| run(s, &synth)).collect();
    let first = &runs[0];

    let report = evaluate(&first.pretrained, &synth, 10, &eval_cfg, 0, &Sequential).unwrap();
    let acc = report.triplet_accuracy.unwrap_or(0.0);
    let level = report.mean_level_srcc().unwrap_or(f64::NAN);
    let vm = report.mean_v_measure(&STRONG).unwrap_or(f64::NAN);
    v.line(
        "desk-scale pretraining (a) triplet accuracy",
        acc >= 0.9 && first.pretrain_secs < 600.0,
        format!("{acc:.3} on {} held-out triplets (>= 0.9), 2000 steps in {:.0}s (< 600s)", eval_cfg.triplets, first.pretrain_secs),
    );
    v.line(
        "desk-scale pretraining (b) level ranking",
        level >= 0.8,
        format!("mean per-type Spearman of predicted level {level:.3} (>= 0.8)"),
    );
    v.line(
        "desk-scale pretraining (c) clustering",
        vm >= 0.5,
        format!("mean V-measure over blur, additive noise, pixelate {vm:.3} (>= 0.5)"),
    );
    let (far, near) = noise_level_distances(&first.pretrained, &synth);
    v.line(
        "backbone separates noise levels",
        far > near,
        format!("mean squared feature distance level1-level5 {far:.4} vs level1-level1 {near:.4}"),
    );

    let mean = |f: fn(&Run) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (pre, rnd, edges) = (mean(|r| r.finetune_srcc), mean(|r| r.random_srcc), mean(|r| r.edges_only_srcc));
    v.line(
        "ablation direction",
        pre >= rnd && pre >= edges,
        format!("mean held-out SRCC over {SEEDS} seeds: pretrained {pre:.4} >= random init {rnd:.4}, nodes+edges {pre:.4} >= edges only {edges:.4}"),
    );

    v.line(
        "end-to-end finetune",
        first.finetune_srcc >= 0.85 && first.finetune_plcc >= 0.85,
        format!(
            "SRCC {:.4}, PLCC {:.4} on {} held-out samples (both >= 0.85)",
            first.finetune_srcc, first.finetune_plcc, eval_cfg.heldout_samples
        ),
    );

    // Determinism: the whole seed-0 pipeline again.
    let (again, _) = pretrain(0);
    let again_bytes = again.to_bytes();
    let reloaded = DgrModel::load(ModelConfig::default(), &again_bytes, LoadMode::Representation, 0).unwrap();
    let tuned_again = finetune(reloaded, 0);
    let tuned_first = DgrModel::load(ModelConfig::default(), &first.finetuned_bytes, LoadMode::Full, 0).unwrap();
    let r1 = evaluate(&tuned_first, &synth, 10, &eval_cfg, 500, &Sequential).unwrap();
    let r2 = evaluate(&tuned_again, &synth, 10, &eval_cfg, 500, &Sequential).unwrap();
    let d = report_distance(&r1, &r2);
    let same_pre = again_bytes == first.pretrained_bytes;
    let same_ft = tuned_again.to_bytes() == first.finetuned_bytes;
    v.line(
        "determinism",
        d <= 1e-10 && same_pre && same_ft,
        format!("report difference {d:.1e} (<= 1e-10), pretrained checkpoints identical {same_pre}, finetuned checkpoints identical {same_ft}"),
    );
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut v = Verdicts { failed: Vec::new() };
    gradient_suite(&mut v);
    algebraic_oracles(&mut v);
    reparameterization(&mut v);
    triplet_properties(&mut v);
    training_criteria(&mut v);
    println!(
        "acceptance: {} failing criteria, {:.0}s total",
        v.failed.len(),
        start.elapsed().as_secs_f64()
    );
    if v.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failing: {}", v.failed.join(", "));
        ExitCode::FAILURE
    }
}
