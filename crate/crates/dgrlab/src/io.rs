//! Files a run reads and writes: checkpoints, CSV loss logs, JSON reports,
//! embedding CSVs and the optional PNG dataset export.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use dgrlab_core::autodiff::Tape;
use dgrlab_core::dgr::Dgr;
use dgrlab_core::eval::EvalReport;
use dgrlab_core::heads::LossBundle;
use dgrlab_core::model::{DgrModel, LoadMode, ModelConfig};
use dgrlab_core::synth::{DistortionSample, Patch};

pub const CHECKPOINT_FILE: &str = "checkpoint.dgr";
pub const PRETRAIN_LOG: &str = "loss.csv";
pub const FINETUNE_LOG: &str = "finetune_loss.csv";
pub const REPORT_FILE: &str = "report.json";

/// Writes via a temporary sibling and a rename so a crash never leaves a
/// half-written file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn save_checkpoint(model: &DgrModel, path: &Path) -> anyhow::Result<()> {
    write_atomic(path, &model.to_bytes())
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig, mode: LoadMode, seed: u64) -> anyhow::Result<DgrModel> {
    let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    DgrModel::load(config.clone(), &bytes, mode, seed).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// `step,l_dist,l_level,total`, one row per pretraining step.
pub struct LossLog {
    writer: csv::Writer<File>,
}

impl LossLog {
    pub fn create(path: &Path, header: &[&str]) -> anyhow::Result<Self> {
        let mut writer = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        writer.write_record(header)?;
        Ok(Self { writer })
    }

    pub fn pretrain(path: &Path) -> anyhow::Result<Self> {
        Self::create(path, &["step", "l_dist", "l_level", "total"])
    }

    pub fn finetune(path: &Path) -> anyhow::Result<Self> {
        Self::create(path, &["step", "loss"])
    }

    pub fn bundle(&mut self, step: usize, b: &LossBundle) -> anyhow::Result<()> {
        self.row(step, &[b.l_dist, b.l_level, b.total])
    }

    pub fn row(&mut self, step: usize, values: &[f64]) -> anyhow::Result<()> {
        let mut rec = vec![step.to_string()];
        rec.extend(values.iter().map(f64::to_string));
        self.writer.write_record(&rec)?;
        Ok(())
    }

    pub fn flush(&mut self) -> anyhow::Result<()> {
        Ok(self.writer.flush()?)
    }
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn write_report(path: &Path, report: &EvalReport) -> anyhow::Result<()> {
    write_atomic(path, (report_json(report) + "\n").as_bytes())
}

/// Node rows `sample_index,type_id,level,v_0..v_{C-1}`.
pub fn write_node_csv(path: &Path, dgr: &Dgr, samples: &[DistortionSample]) -> anyhow::Result<()> {
    let c = dgr.nodes.shape()[1];
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["sample_index".to_string(), "type_id".into(), "level".into()];
    header.extend((0..c).map(|k| format!("v_{k}")));
    w.write_record(&header)?;
    for (i, s) in samples.iter().enumerate() {
        let mut rec = vec![i.to_string(), s.type_id.to_string(), s.level.to_string()];
        rec.extend(dgr.nodes.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    Ok(w.flush()?)
}

/// Edge rows `i,j,e_0..e_{C_E-1}` for every ordered pair.
pub fn write_edge_csv(path: &Path, dgr: &Dgr) -> anyhow::Result<()> {
    let ce = dgr.edge_dim();
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["i".to_string(), "j".into()];
    header.extend((0..ce).map(|k| format!("e_{k}")));
    w.write_record(&header)?;
    for i in 0..dgr.len() {
        for j in 0..dgr.len() {
            let mut rec = vec![i.to_string(), j.to_string()];
            rec.extend(dgr.edge(i, j).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    Ok(w.flush()?)
}

/// Builds the graph of one batch on frozen weights.
pub fn materialize(model: &DgrModel, samples: &[DistortionSample], type_id: Option<usize>) -> anyhow::Result<Dgr> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let vars = model.dgr(&mut tape, &p, samples.iter().map(|s| &s.patch))?;
    Ok(Dgr::from_vars(&tape, &vars, type_id))
}

pub fn patch_to_png(patch: &Patch, path: &Path) -> anyhow::Result<()> {
    let bytes: Vec<u8> = patch
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(patch.width as u32, patch.height as u32, bytes)
        .context("patch buffer does not match its size")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// PNG per sample plus `index.csv` with `path,type_id,level,proxy_mos,seed`.
pub fn export_dataset(dir: &Path, samples: &[DistortionSample]) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let index = dir.join("index.csv");
    let mut w = csv::Writer::from_path(&index)?;
    w.write_record(["path", "type_id", "level", "proxy_mos", "seed"])?;
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}_t{}_l{}.png", s.type_id, s.level);
        patch_to_png(&s.patch, &dir.join(&name))?;
        w.write_record([
            name,
            s.type_id.to_string(),
            s.level.to_string(),
            s.proxy_mos.to_string(),
            s.content_seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(index)
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let probe = dir.join(".write-test");
    File::create(&probe)
        .and_then(|mut f| f.write_all(b""))
        .with_context(|| format!("output directory {} is not writable", dir.display()))?;
    std::fs::remove_file(&probe).ok();
    Ok(())
}
