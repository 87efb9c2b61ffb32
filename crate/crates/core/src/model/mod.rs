//! Model configuration, modality identifiers and the parameter layout shared
//! by every stage of training.

pub mod layers;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crossmodal::RefinedSlot;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use layers::Init;

/// One of the three input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityId {
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "a")]
    Acoustic,
    #[serde(rename = "v")]
    Vision,
}

impl ModalityId {
    pub const ALL: [ModalityId; 3] = [ModalityId::Text, ModalityId::Acoustic, ModalityId::Vision];

    pub fn index(self) -> usize {
        match self {
            ModalityId::Text => 0,
            ModalityId::Acoustic => 1,
            ModalityId::Vision => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            ModalityId::Text => 't',
            ModalityId::Acoustic => 'a',
            ModalityId::Vision => 'v',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            't' => Some(ModalityId::Text),
            'a' => Some(ModalityId::Acoustic),
            'v' => Some(ModalityId::Vision),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModalityId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Fixed sequence length and feature width of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityShape {
    pub seq_len: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input shapes in `t, a, v` order.
    pub inputs: [ModalityShape; 3],
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub projection_dim: usize,
    /// Cross-attention blocks per refinement level.
    pub cross_blocks: usize,
    /// Learned per-slot embeddings added before fusion self-attention.
    pub type_embeddings: bool,
    pub classifier_hidden: usize,
    pub task: TaskKind,
    /// Class count; ignored for regression.
    pub classes: usize,
}

impl ModelConfig {
    /// Laptop-sized preset: hidden 64, 2 layers, 4 heads, projection 32.
    pub fn desk(inputs: [ModalityShape; 3], task: TaskKind, classes: usize) -> Self {
        Self {
            inputs,
            model_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 64,
            projection_dim: 32,
            cross_blocks: 1,
            type_embeddings: true,
            classifier_hidden: 64,
            task,
            classes,
        }
    }

    /// Full-size hyperparameters: hidden 512, projection 256.
    pub fn paper(inputs: [ModalityShape; 3], task: TaskKind, classes: usize) -> Self {
        Self {
            inputs,
            model_dim: 512,
            num_layers: 2,
            num_heads: 8,
            ffn_dim: 2048,
            projection_dim: 256,
            cross_blocks: 1,
            type_embeddings: true,
            classifier_hidden: 512,
            task,
            classes,
        }
    }

    pub fn input(&self, m: ModalityId) -> ModalityShape {
        self.inputs[m.index()]
    }

    /// Width of the classifier output: `classes` or 1 for regression.
    pub fn out_dim(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.model_dim,
            self.num_heads,
            self.ffn_dim,
            self.projection_dim,
            self.cross_blocks,
            self.classifier_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        if self.inputs.iter().any(|s| s.seq_len == 0 || s.dim == 0) {
            return Err(Error::Config("input sequence lengths and widths must be >= 1".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.task == TaskKind::Classification && self.classes < 2 {
            return Err(Error::Config("classification needs at least 2 classes".into()));
        }
        Ok(())
    }

    /// SHA-256 over every architecture-defining field.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"mvcl-model-config-v1");
        for s in &self.inputs {
            h.update((s.seq_len as u64).to_le_bytes());
            h.update((s.dim as u64).to_le_bytes());
        }
        for v in [
            self.model_dim,
            self.num_layers,
            self.num_heads,
            self.ffn_dim,
            self.projection_dim,
            self.cross_blocks,
            self.classifier_hidden,
            self.classes,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        h.update([self.type_embeddings as u8]);
        h.update([match self.task {
            TaskKind::Classification => 0u8,
            TaskKind::Regression => 1u8,
        }]);
        h.finalize().into()
    }
}

/// Parameter-name prefixes of each trainable group.
pub mod groups {
    use super::ModalityId;

    pub fn encoder(m: ModalityId) -> String {
        format!("enc.{m}")
    }
    pub fn unimodal_projection(m: ModalityId) -> String {
        format!("proj.{m}")
    }
    pub const CROSSMODAL: &str = "cross";
    pub const SSCL_PROJECTION: &str = "sscl_proj";
    pub const FUSION: &str = "fusion";
    pub const FUSED_PROJECTION: &str = "proj.fused";
    pub const MULTIMODAL_HEAD: &str = "head.multi";
    pub fn unimodal_head(m: ModalityId) -> String {
        format!("head.{m}")
    }
    pub fn sscl_projection(m: ModalityId) -> String {
        format!("{SSCL_PROJECTION}.{m}")
    }
}

/// All parameters of the framework plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct MvclModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl MvclModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            seed,
        };
        let d = config.model_dim;
        for m in ModalityId::ALL {
            crate::encoders::init_encoder(&mut init, &config, m);
            init.mlp(&groups::unimodal_projection(m), d, d, config.projection_dim);
            init.mlp(&groups::sscl_projection(m), d, d, config.projection_dim);
            crate::losses::init_classifier_head(&mut init, &groups::unimodal_head(m), d, config.classifier_hidden, config.out_dim());
        }
        for slot in RefinedSlot::ALL {
            crate::crossmodal::init_pathway(&mut init, &config, slot);
        }
        crate::crossmodal::init_fusion(&mut init, &config);
        init.mlp(groups::FUSED_PROJECTION, d, d, config.projection_dim);
        crate::losses::init_classifier_head(
            &mut init,
            groups::MULTIMODAL_HEAD,
            d,
            config.classifier_hidden,
            config.out_dim(),
        );
        Ok(Self { config, params })
    }

    /// Re-draws the parameters under `prefix` as if freshly constructed
    /// with `seed`.
    pub fn reinitialize(&mut self, prefix: &str, seed: u64) -> Result<()> {
        let fresh = MvclModel::new(self.config.clone(), seed)?;
        for (name, t) in fresh.params.with_prefix(prefix) {
            self.params.insert(name.clone(), t.clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let s = ModalityShape { seq_len: 3, dim: 4 };
        let mut c = ModelConfig::desk([s; 3], TaskKind::Regression, 2);
        c.model_dim = 8;
        c.num_heads = 2;
        c.ffn_dim = 8;
        c.projection_dim = 4;
        c.classifier_hidden = 8;
        c
    }

    #[test]
    fn init_is_deterministic() {
        let a = MvclModel::new(tiny(), 5).unwrap();
        let b = MvclModel::new(tiny(), 5).unwrap();
        assert_eq!(a.params.digest(""), b.params.digest(""));
        let c = MvclModel::new(tiny(), 6).unwrap();
        assert_ne!(a.params.digest(""), c.params.digest(""));
    }

    #[test]
    fn validate_rejects_bad_heads() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = tiny();
        let mut b = tiny();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.model_dim = 16;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn every_group_is_populated() {
        let m = MvclModel::new(tiny(), 1).unwrap();
        let mut prefixes = vec![
            groups::CROSSMODAL.to_string(),
            groups::SSCL_PROJECTION.to_string(),
            groups::FUSION.to_string(),
            groups::FUSED_PROJECTION.to_string(),
            groups::MULTIMODAL_HEAD.to_string(),
        ];
        for mm in ModalityId::ALL {
            prefixes.push(groups::encoder(mm));
            prefixes.push(groups::unimodal_projection(mm));
            prefixes.push(groups::unimodal_head(mm));
        }
        for p in prefixes {
            assert!(m.params.with_prefix(&p).count() > 0, "{p}");
        }
    }
}
