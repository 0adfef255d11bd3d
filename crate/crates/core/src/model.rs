//! The full network: backbone, DGR builder, both pretraining heads and the
//! score regressor, sharing one [`ParamStore`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{stack_patches, Backbone};
use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::dgr::{DgrBuilder, DgrVars, GcnStack};
use crate::heads::HeadInput;
use crate::nn::{Bound, Mlp, ParamId, ParamStore};
use crate::rng::{self, salt};
use crate::synth::Patch;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint/config mismatch on `{key}`: checkpoint has {checkpoint}, config has {config}")]
    Mismatch {
        key: String,
        checkpoint: String,
        config: String,
    },
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint has unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature and node embedding width `C`.
    pub feature_dim: usize,
    /// Edge embedding width `C_E`, smaller than `C`.
    pub edge_dim: usize,
    /// Type code width `C_V`.
    pub code_dim: usize,
    pub conv_channels: Vec<usize>,
    pub node_builder_layers: usize,
    pub gcn_layers: usize,
    pub fpn_hidden: usize,
    /// Hidden width of the score regressor; 0 makes it a single linear layer.
    pub head_hidden: usize,
    pub head_input: HeadInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            edge_dim: 16,
            code_dim: 32,
            conv_channels: vec![8, 16, 32, 32],
            node_builder_layers: 3,
            gcn_layers: 3,
            fpn_hidden: 32,
            head_hidden: 32,
            head_input: HeadInput::NodesAndEdges,
        }
    }
}

/// Fingerprint keys that only concern the score regressor.
const HEAD_KEYS: [&str; 2] = ["head_hidden", "head_input"];

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.feature_dim == 0 || self.edge_dim == 0 || self.code_dim == 0 {
            return err("feature_dim, edge_dim and code_dim must be positive");
        }
        if self.edge_dim >= self.feature_dim {
            return err("edge_dim must be smaller than feature_dim");
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return err("conv_channels must be nonempty and positive");
        }
        if self.node_builder_layers == 0 || self.gcn_layers == 0 || self.fpn_hidden == 0 {
            return err("layer counts and fpn_hidden must be positive");
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let conv: Vec<String> = self.conv_channels.iter().map(ToString::to_string).collect();
        vec![
            ("feature_dim", self.feature_dim.to_string()),
            ("edge_dim", self.edge_dim.to_string()),
            ("code_dim", self.code_dim.to_string()),
            ("conv_channels", conv.join(",")),
            ("node_builder_layers", self.node_builder_layers.to_string()),
            ("gcn_layers", self.gcn_layers.to_string()),
            ("fpn_hidden", self.fpn_hidden.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("head_input", self.head_input.name().to_string()),
        ]
    }

    /// `key=value;…` summary of the architecture, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let parts: Vec<String> = self.entries().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("dgr;{}", parts.join(";"))
    }

    fn head_widths(&self) -> Vec<usize> {
        let input = self.head_input.width(self.feature_dim, self.edge_dim);
        if self.head_hidden == 0 {
            vec![input, 1]
        } else {
            vec![input, self.head_hidden, 1]
        }
    }
}

fn parse_fingerprint(s: &str) -> BTreeMap<&str, &str> {
    s.split(';').filter_map(|kv| kv.split_once('=')).collect()
}

/// How much of a checkpoint [`DgrModel::from_checkpoint`] takes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Every parameter, including the score regressor.
    Full,
    /// Everything except the score regressor, which is freshly initialized.
    /// Used to finetune from a pretraining checkpoint.
    Representation,
}

#[derive(Debug, Clone)]
pub struct DgrModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub builder: DgrBuilder,
    pub tdn: GcnStack,
    pub fpn: Mlp,
    pub head: Mlp,
}

impl DgrModel {
    /// Fresh He-initialized model; the score regressor draws from its own
    /// stream so it can be re-drawn independently.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, salt::INIT);
        let c = config.feature_dim;
        let backbone = Backbone::new(&mut store, &config.conv_channels, c, &mut r);
        let builder = DgrBuilder::new(
            &mut store,
            c,
            config.node_builder_layers,
            config.gcn_layers,
            config.edge_dim,
            &mut r,
        );
        let mut tdn_widths = vec![c; config.gcn_layers];
        tdn_widths.push(config.code_dim);
        let tdn = GcnStack::new(&mut store, "tdn", &tdn_widths, &mut r);
        let fpn = Mlp::new(&mut store, "fpn", &[c + config.edge_dim, config.fpn_hidden, 2], &mut r);
        let mut hr = rng::stream(seed, salt::HEAD_INIT);
        let head = Mlp::new(&mut store, "head", &config.head_widths(), &mut hr);
        Ok(Self {
            config,
            store,
            backbone,
            builder,
            tdn,
            fpn,
            head,
        })
    }

    /// Builds a model for `config` and fills it from `ckpt`. Architecture
    /// keys must match; in [`LoadMode::Representation`] the regressor keys
    /// may differ and the regressor keeps its fresh initialization.
    pub fn from_checkpoint(config: ModelConfig, ckpt: &Checkpoint, mode: LoadMode, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::new(config, seed)?;
        let expected = model.config.fingerprint();
        let want = parse_fingerprint(&expected);
        let have = parse_fingerprint(&ckpt.fingerprint);
        for (key, value) in &want {
            if mode == LoadMode::Representation && HEAD_KEYS.contains(key) {
                continue;
            }
            match have.get(key) {
                Some(v) if v == value => {}
                other => {
                    return Err(ModelError::Mismatch {
                        key: key.to_string(),
                        checkpoint: other.map_or("nothing".into(), |v| v.to_string()),
                        config: value.to_string(),
                    })
                }
            }
        }
        let head_ids = model.head.params();
        for id in model.store.ids().collect::<Vec<_>>() {
            if mode == LoadMode::Representation && head_ids.contains(&id) {
                continue;
            }
            let name = model.store.name(id).to_string();
            let t = ckpt.get(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != model.store.get(id).shape() {
                return Err(ModelError::ParamShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: model.store.get(id).shape().to_vec(),
                });
            }
            *model.store.get_mut(id) = t.clone();
        }
        if mode == LoadMode::Full {
            if let Some((name, _)) = ckpt.params.iter().find(|(n, _)| model.store.find(n).is_none()) {
                return Err(ModelError::UnexpectedParam(name.clone()));
            }
        }
        Ok(model)
    }

    pub fn load(config: ModelConfig, bytes: &[u8], mode: LoadMode, seed: u64) -> Result<Self, ModelError> {
        Self::from_checkpoint(config, &checkpoint::decode(bytes)?, mode, seed)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.config.fingerprint(), &self.store)
    }

    /// Features `[N, C]` for a batch of equally sized patches.
    pub fn features<'a>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        patches: impl IntoIterator<Item = &'a Patch>,
    ) -> Result<Var, TensorError> {
        let x = tape.constant(stack_patches(patches)?);
        self.backbone.forward(tape, p, x)
    }

    /// Backbone, node builder and edge builder over one batch.
    pub fn dgr<'a>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        patches: impl IntoIterator<Item = &'a Patch>,
    ) -> Result<DgrVars, TensorError> {
        let f = self.features(tape, p, patches)?;
        self.builder.build(tape, p, f)
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.backbone.params()
    }

    /// Backbone, node builder and edge builder.
    pub fn representation_params(&self) -> Vec<ParamId> {
        let mut v = self.backbone.params();
        v.extend(self.builder.params());
        v
    }

    /// Everything trained during pretraining.
    pub fn pretrain_params(&self) -> Vec<ParamId> {
        let mut v = self.representation_params();
        v.extend(self.tdn.params());
        v.extend(self.fpn.params());
        v
    }

    /// Everything trained during finetuning: the representation and the
    /// score regressor, without the pretraining heads.
    pub fn finetune_params(&self) -> Vec<ParamId> {
        let mut v = self.representation_params();
        v.extend(self.head.params());
        v
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.head.params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_lists_architecture() {
        let fp = ModelConfig::default().fingerprint();
        assert!(fp.starts_with("dgr;feature_dim=64;edge_dim=16;code_dim=32;"));
        assert!(fp.contains("conv_channels=8,16,32,32"));
        assert!(fp.ends_with("head_input=nodes-and-edges"));
    }

    #[test]
    fn rejects_wide_edges() {
        let cfg = ModelConfig {
            edge_dim: 64,
            ..ModelConfig::default()
        };
        assert!(matches!(DgrModel::new(cfg, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn full_load_round_trip() {
        let m = DgrModel::new(ModelConfig::default(), 3).unwrap();
        let bytes = m.to_bytes();
        let back = DgrModel::load(ModelConfig::default(), &bytes, LoadMode::Full, 99).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = DgrModel::new(ModelConfig::default(), 3).unwrap();
        let other = ModelConfig {
            feature_dim: 48,
            ..ModelConfig::default()
        };
        let err = DgrModel::load(other, &m.to_bytes(), LoadMode::Full, 0).unwrap_err();
        assert_eq!(
            err,
            ModelError::Mismatch {
                key: "feature_dim".into(),
                checkpoint: "64".into(),
                config: "48".into()
            }
        );
    }

    #[test]
    fn representation_load_swaps_head() {
        let m = DgrModel::new(ModelConfig::default(), 3).unwrap();
        let edges_only = ModelConfig {
            head_input: HeadInput::EdgesOnly,
            ..ModelConfig::default()
        };
        assert!(DgrModel::load(edges_only.clone(), &m.to_bytes(), LoadMode::Full, 0).is_err());
        let e = DgrModel::load(edges_only, &m.to_bytes(), LoadMode::Representation, 0).unwrap();
        for id in m.representation_params() {
            assert_eq!(e.store.get(id), m.store.get(id));
        }
        assert_eq!(e.store.get(e.head.layers[0].weight).shape(), &[16, 32]);
    }

    #[test]
    fn truncated_checkpoint_loads_nothing() {
        let m = DgrModel::new(ModelConfig::default(), 3).unwrap();
        let bytes = m.to_bytes();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(DgrModel::load(ModelConfig::default(), &bytes[..cut], LoadMode::Full, 0).is_err());
        }
    }
}
