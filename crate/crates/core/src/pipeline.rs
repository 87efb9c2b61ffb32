//! Staged training: supervised contrastive encoders, self-supervised
//! cross-modal refinement, supervised contrastive fusion, and the
//! classifier heads.
//!
//! Each phase consumes the checkpoint of the previous one and returns a new
//! checkpoint plus a [`StageReport`]. Parameters outside a phase's trainable
//! groups are never bound as trainable, and their digests are compared
//! before and after every phase.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crossmodal::{fuse_batch, pool_refined, refine_batch, RefinedSlot};
use crate::data::{contrastive_classes, make_batches, Batch, BatchMode, Dataset, SampleRecord, Splits};
use crate::encoders::{encode_batch, project_batch};
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss, classifier_forward, mse_loss, pairwise_sscl_loss, supcon_loss, ContrastiveConfig, Reduction,
};
use crate::metrics::MetricReport;
use crate::model::{groups, layers, ModalityId, ModelConfig, MvclModel, TaskKind};
use crate::numerics::{cosine_sim, Graph, ParamStore, RngState, SeededRng, Tensor, Trainable, Var};

/// Training phases in execution order. `Init` marks an untrained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Init = 0,
    Scl1 = 1,
    Sscl = 2,
    Scl2 = 3,
    ClsUnimodal = 4,
    ClsMultimodal = 5,
}

impl StageId {
    pub const TRAINING: [StageId; 5] = [
        StageId::Scl1,
        StageId::Sscl,
        StageId::Scl2,
        StageId::ClsUnimodal,
        StageId::ClsMultimodal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageId::Init => "init",
            StageId::Scl1 => "scl1",
            StageId::Sscl => "sscl",
            StageId::Scl2 => "scl2",
            StageId::ClsUnimodal => "cls_unimodal",
            StageId::ClsMultimodal => "cls_multimodal",
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        [
            StageId::Init,
            StageId::Scl1,
            StageId::Sscl,
            StageId::Scl2,
            StageId::ClsUnimodal,
            StageId::ClsMultimodal,
        ]
        .get(b as usize)
        .copied()
    }
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSelector {
    /// Supervised contrastive loss on each projected unimodal vector.
    UnimodalSupcon,
    /// Sum of the three pairwise self-supervised losses.
    SsclTotal,
    /// Supervised contrastive loss on the projected fused vector.
    FusedSupcon,
    /// Cross-entropy or mean squared error, by task kind.
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

/// User-facing training knobs from which a [`StagePlan`] is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_scl1: usize,
    pub epochs_sscl: usize,
    pub epochs_scl2: usize,
    pub epochs_cls: usize,
    pub temperature: f64,
    /// Decimal places kept when grouping regression scores into classes.
    pub label_decimals: u32,
    pub optimizer: OptimizerSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs_scl1: 20,
            epochs_sscl: 20,
            epochs_scl2: 20,
            epochs_cls: 30,
            temperature: 0.2,
            label_decimals: 1,
            optimizer: OptimizerSettings::default(),
        }
    }
}

impl TrainConfig {
    /// Full-size preset: batch size 128.
    pub fn paper() -> Self {
        Self {
            batch_size: 128,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub id: StageId,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub loss: LossSelector,
    pub epochs: usize,
    pub optimizer: OptimizerSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
    pub batch_size: usize,
    pub temperature: f64,
    pub label_decimals: u32,
}

/// Every top-level parameter group of the model.
pub fn all_groups() -> Vec<String> {
    let mut g = Vec::new();
    for m in ModalityId::ALL {
        g.push(groups::encoder(m));
        g.push(groups::unimodal_projection(m));
        g.push(groups::unimodal_head(m));
    }
    g.extend(
        [
            groups::CROSSMODAL,
            groups::SSCL_PROJECTION,
            groups::FUSION,
            groups::FUSED_PROJECTION,
            groups::MULTIMODAL_HEAD,
        ]
        .map(String::from),
    );
    g
}

fn spec(id: StageId, trainable: Vec<String>, loss: LossSelector, epochs: usize, opt: OptimizerSettings) -> StageSpec {
    let frozen = all_groups().into_iter().filter(|g| !trainable.contains(g)).collect();
    StageSpec {
        id,
        trainable,
        frozen,
        loss,
        epochs,
        optimizer: opt,
    }
}

impl StagePlan {
    pub fn standard(cfg: &TrainConfig) -> Self {
        let per_modality = |f: fn(ModalityId) -> String| ModalityId::ALL.map(f).to_vec();
        let opt = cfg.optimizer;
        let mut scl1 = per_modality(groups::encoder);
        scl1.extend(per_modality(groups::unimodal_projection));
        let mut multi = per_modality(groups::encoder);
        multi.extend([groups::CROSSMODAL, groups::FUSION, groups::MULTIMODAL_HEAD].map(String::from));
        Self {
            stages: vec![
                spec(StageId::Scl1, scl1, LossSelector::UnimodalSupcon, cfg.epochs_scl1, opt),
                spec(
                    StageId::Sscl,
                    vec![groups::CROSSMODAL.into(), groups::SSCL_PROJECTION.into()],
                    LossSelector::SsclTotal,
                    cfg.epochs_sscl,
                    opt,
                ),
                spec(
                    StageId::Scl2,
                    vec![groups::FUSION.into(), groups::FUSED_PROJECTION.into()],
                    LossSelector::FusedSupcon,
                    cfg.epochs_scl2,
                    opt,
                ),
                spec(
                    StageId::ClsUnimodal,
                    per_modality(groups::unimodal_head),
                    LossSelector::Task,
                    cfg.epochs_cls,
                    opt,
                ),
                spec(StageId::ClsMultimodal, multi, LossSelector::Task, cfg.epochs_cls, opt),
            ],
            batch_size: cfg.batch_size,
            temperature: cfg.temperature,
            label_decimals: cfg.label_decimals,
        }
    }

    pub fn stage(&self, id: StageId) -> Result<&StageSpec> {
        self.stages
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Config(format!("plan has no stage {id}")))
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            reduction: Reduction::Mean,
        }
    }

    /// Checks the phase order and which groups each phase may train.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 {
            return bad(format!("contrastive batch size must be >= 2, got {}", self.batch_size));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        let ids: Vec<StageId> = self.stages.iter().map(|s| s.id).collect();
        if ids != StageId::TRAINING {
            return bad(format!("stages must run in order {:?}, got {ids:?}", StageId::TRAINING));
        }
        let enc: Vec<String> = ModalityId::ALL.map(groups::encoder).to_vec();
        let has = |s: &StageSpec, g: &str| s.trainable.iter().any(|t| t == g);
        let frozen = |s: &StageSpec, g: &str| s.frozen.iter().any(|t| t == g);
        for s in &self.stages {
            if let Some(g) = s.trainable.iter().find(|g| s.frozen.contains(g)) {
                return bad(format!("{}: group {g} is both trainable and frozen", s.id));
            }
            let o = &s.optimizer;
            if !(o.lr > 0.0) || !(o.clip_norm >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2)
            {
                return bad(format!("{}: invalid optimizer settings", s.id));
            }
        }
        let [s1, s2, s3, cu, cm] = [0, 1, 2, 3, 4].map(|i| &self.stages[i]);
        let allowed = |s: &StageSpec, ok: &[String]| s.trainable.iter().all(|t| ok.contains(t));
        let mut ok1 = enc.clone();
        ok1.extend(ModalityId::ALL.map(groups::unimodal_projection));
        if !allowed(s1, &ok1) || s1.loss != LossSelector::UnimodalSupcon {
            return bad("scl1 may train only encoders and their projections on the unimodal loss".into());
        }
        if !has(s2, groups::CROSSMODAL) || !enc.iter().all(|e| frozen(s2, e)) || s2.loss != LossSelector::SsclTotal {
            return bad("sscl must train the cross-modal module with encoders frozen".into());
        }
        if !allowed(s2, &[groups::CROSSMODAL.into(), groups::SSCL_PROJECTION.into()]) {
            return bad("sscl may train only the cross-modal module and its projections".into());
        }
        if !has(s3, groups::FUSION)
            || !has(s3, groups::FUSED_PROJECTION)
            || !allowed(s3, &[groups::FUSION.into(), groups::FUSED_PROJECTION.into()])
            || s3.loss != LossSelector::FusedSupcon
        {
            return bad("scl2 must train exactly the fusion and its projection".into());
        }
        if !allowed(cu, &ModalityId::ALL.map(groups::unimodal_head)) || cu.loss != LossSelector::Task {
            return bad("unimodal classifiers must train on frozen representations".into());
        }
        if !has(cm, groups::MULTIMODAL_HEAD) || cm.loss != LossSelector::Task {
            return bad("multimodal classifier phase must train the multimodal head".into());
        }
        Ok(())
    }
}

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    settings: OptimizerSettings,
    t: i32,
    moments: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(settings: OptimizerSettings) -> Self {
        Self {
            settings,
            t: 0,
            moments: Default::default(),
        }
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<f64> {
        let s = self.settings;
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        let k = if s.clip_norm > 0.0 && norm > s.clip_norm {
            s.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let (c1, c2) = (1.0 - s.beta1.powi(self.t), 1.0 - s.beta2.powi(self.t));
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * k;
                *mi = s.beta1 * *mi + (1.0 - s.beta1) * gi;
                *vi = s.beta2 * *vi + (1.0 - s.beta2) * gi * gi;
                *w -= s.lr * (*mi / c1) / ((*vi / c2).sqrt() + s.eps);
            }
        }
        Ok(norm)
    }
}

/// Model parameters with training position and phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: StageId,
    pub model: MvclModel,
    pub rng: RngState,
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CKPT_MAGIC: &[u8; 6] = b"MVCK1\n";

impl Checkpoint {
    pub fn initial(config: ModelConfig, seed: u64) -> Result<Self> {
        let model = MvclModel::new(config, seed)?;
        Ok(Self {
            stage: StageId::Init,
            model,
            rng: SeededRng::new(seed).fork(0x74_7261_696e).state(),
        })
    }

    /// `MVCK1` bytes followed by a SHA-256 of everything before it.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.model.config.fingerprint());
        out.push(self.stage as u8);
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, t) in self.model.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses a checkpoint for `config`. Nothing is returned unless the
    /// whole file verifies.
    pub fn decode(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(format!("checkpoint: {m}"));
        if bytes.len() < 6 || &bytes[..6] != CKPT_MAGIC {
            return Err(Error::BadMagic { expected: "MVCK1" });
        }
        if bytes.len() < 10 {
            return Err(corrupt("truncated header"));
        }
        let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 42 {
            return Err(corrupt("truncated header"));
        }
        if bytes[10..42] != config.fingerprint() {
            return Err(Error::FingerprintMismatch);
        }
        if bytes.len() < 42 + 32 {
            return Err(corrupt("truncated"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        let mut pos = 42;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + n).ok_or_else(|| corrupt("record runs past end"))?;
            pos += n;
            Ok(s)
        };
        let stage = StageId::from_byte(take(1)?[0]).ok_or_else(|| corrupt("unknown stage id"))?;
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let stream = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let word_pos = u128::from_le_bytes(take(16)?.try_into().unwrap());
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let count = u32_at(take(4)?);
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = u32_at(take(4)?);
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| corrupt("non-UTF-8 name"))?;
            let rank = u32_at(take(4)?);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(take(4)?));
            }
            let n: usize = shape.iter().product();
            let payload = take(n.checked_mul(8).ok_or_else(|| corrupt("tensor size overflows"))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(&format!("tensor {name}: {e}")))?;
            params.insert(name, t);
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes after tensor table"));
        }
        let reference = MvclModel::new(config.clone(), 0)?;
        let layout = |p: &ParamStore| p.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>();
        if layout(&params) != layout(&reference.params) {
            return Err(corrupt("parameter table does not match the model layout"));
        }
        Ok(Self {
            stage,
            model: MvclModel {
                config: config.clone(),
                params,
            },
            rng: RngState { seed, stream, word_pos },
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.encode())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?, config)
}

/// Per-phase training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: StageId,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Batches skipped because no anchor had a positive.
    pub skipped_batches: usize,
    /// Phase loss on the whole validation split before and after training.
    pub val_loss_before: Option<f64>,
    pub val_loss_after: Option<f64>,
    /// Mean cosine between paired refined views on validation.
    pub view_agreement_before: Option<f64>,
    pub view_agreement_after: Option<f64>,
    /// Test metrics of the multimodal head before and after training.
    pub metrics_before: Option<MetricReport>,
    pub metrics_after: Option<MetricReport>,
    /// Test metrics of each unimodal head.
    pub unimodal_metrics: Vec<(ModalityId, MetricReport)>,
}

impl StageReport {
    fn new(stage: StageId) -> Self {
        Self {
            stage,
            epoch_losses: Vec::new(),
            skipped_batches: 0,
            val_loss_before: None,
            val_loss_after: None,
            view_agreement_before: None,
            view_agreement_after: None,
            metrics_before: None,
            metrics_after: None,
            unimodal_metrics: Vec::new(),
        }
    }
}

fn expect_stage(ckpt: &Checkpoint, allowed: &[StageId]) -> Result<()> {
    if allowed.contains(&ckpt.stage) {
        return Ok(());
    }
    let names: Vec<&str> = allowed.iter().map(|s| s.name()).collect();
    Err(Error::StageOrder {
        expected: names.join(" or "),
        found: ckpt.stage.name().to_string(),
    })
}

fn check_data(cfg: &ModelConfig, d: &Dataset) -> Result<()> {
    if d.header.task != cfg.task {
        return Err(Error::TaskMismatch(format!(
            "model is configured for {:?}, dataset holds {:?} labels",
            cfg.task, d.header.task
        )));
    }
    if cfg.task == TaskKind::Classification && d.header.classes != cfg.classes {
        return Err(Error::TaskMismatch(format!(
            "model has {} classes, dataset {}",
            cfg.classes, d.header.classes
        )));
    }
    if d.header.shapes != cfg.inputs {
        return Err(Error::Config(format!(
            "dataset input shapes {:?} differ from model inputs {:?}",
            d.header.shapes, cfg.inputs
        )));
    }
    if d.is_empty() {
        return Err(Error::EmptyInput { op: "training data" });
    }
    Ok(())
}

fn check_splits(cfg: &ModelConfig, s: &Splits) -> Result<()> {
    check_data(cfg, &s.train)?;
    check_data(cfg, &s.val)?;
    check_data(cfg, &s.test)
}

fn frozen_digests(params: &ParamStore, spec: &StageSpec) -> Vec<[u8; 32]> {
    spec.frozen.iter().map(|g| params.digest(g)).collect()
}

fn verify_frozen(before: &[[u8; 32]], params: &ParamStore, spec: &StageSpec) -> Result<()> {
    for (g, d) in spec.frozen.iter().zip(before) {
        if params.digest(g) != *d {
            return Err(Error::Corrupt(format!("{}: frozen group {g} changed", spec.id)));
        }
    }
    Ok(())
}

/// Rows `[i * seg, (i + 1) * seg)` of `t` for each `i` in `idx`.
fn gather(t: &Tensor, idx: &[usize], seg: usize) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * seg * c);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * seg * c..(i + 1) * seg * c]);
    }
    Tensor::from_parts(vec![idx.len() * seg, c], data)
}

/// Frozen encoder outputs for a whole split.
#[derive(Debug, Clone)]
pub struct EncodedSplit {
    /// `[N * L_m, D]` per modality.
    pub sequences: [Tensor; 3],
    /// `[N, D]` per modality.
    pub pooled: [Tensor; 3],
}

const EVAL_CHUNK: usize = 64;

fn eval_batches(records: &[SampleRecord]) -> Result<Vec<Batch>> {
    make_batches(records, EVAL_CHUNK, 0, BatchMode::Evaluation)
}

fn concat(parts: Vec<Tensor>) -> Result<Tensor> {
    Tensor::stack_rows(&parts)
}

/// Encodes every record with frozen parameters, fanning out over threads.
pub fn encode_split(model: &MvclModel, records: &[SampleRecord]) -> Result<EncodedSplit> {
    let parts: Vec<[Tensor; 6]> = eval_batches(records)?
        .par_iter()
        .map(|b| -> Result<[Tensor; 6]> {
            let mut g = Graph::frozen(&model.params);
            let mut seq = Vec::with_capacity(3);
            let mut pooled = Vec::with_capacity(3);
            for m in ModalityId::ALL {
                let x = g.input(b.x[m.index()].clone());
                let e = encode_batch(&mut g, &model.config, m, x, b.len())?;
                seq.push(g.value(e.sequence).clone());
                pooled.push(g.value(e.pooled).clone());
            }
            seq.extend(pooled);
            Ok(seq.try_into().unwrap())
        })
        .collect::<Result<_>>()?;
    let column = |k: usize| concat(parts.iter().map(|p| p[k].clone()).collect());
    Ok(EncodedSplit {
        sequences: [column(0)?, column(1)?, column(2)?],
        pooled: [column(3)?, column(4)?, column(5)?],
    })
}

/// Pooled refined representations `[N, D]` per slot from frozen encoder
/// outputs.
pub fn refine_split(model: &MvclModel, enc: &EncodedSplit) -> Result<[Tensor; 6]> {
    let n = enc.pooled[0].rows();
    let cfg = &model.config;
    let chunks: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(EVAL_CHUNK).map(<[usize]>::to_vec).collect();
    let parts: Vec<[Tensor; 6]> = chunks
        .par_iter()
        .map(|idx| -> Result<[Tensor; 6]> {
            let mut g = Graph::frozen(&model.params);
            let hidden = ModalityId::ALL.map(|m| g.input(gather(&enc.sequences[m.index()], idx, cfg.input(m).seq_len)));
            let refined = refine_batch(&mut g, cfg, hidden, idx.len())?;
            let pooled = pool_refined(&mut g, cfg, refined)?;
            Ok(pooled.map(|p| g.value(p).clone()))
        })
        .collect::<Result<_>>()?;
    let column = |k: usize| concat(parts.iter().map(|p| p[k].clone()).collect());
    Ok([column(0)?, column(1)?, column(2)?, column(3)?, column(4)?, column(5)?])
}

/// Fused representations `[N, D]` from pooled refined slots.
pub fn fuse_split(model: &MvclModel, refined: &[Tensor; 6]) -> Result<Tensor> {
    let n = refined[0].rows();
    let chunks: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(EVAL_CHUNK).map(<[usize]>::to_vec).collect();
    let parts: Vec<Tensor> = chunks
        .par_iter()
        .map(|idx| -> Result<Tensor> {
            let mut g = Graph::frozen(&model.params);
            let p = refined.each_ref().map(|r| g.input(gather(r, idx, 1)));
            let f = fuse_batch(&mut g, &model.config, p, idx.len())?;
            Ok(g.value(f).clone())
        })
        .collect::<Result<_>>()?;
    concat(parts)
}

/// Which classifier head to train or evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierTarget {
    Unimodal(ModalityId),
    Multimodal,
}

impl ClassifierTarget {
    fn head(self) -> String {
        match self {
            ClassifierTarget::Unimodal(m) => groups::unimodal_head(m),
            ClassifierTarget::Multimodal => groups::MULTIMODAL_HEAD.into(),
        }
    }
}

/// Sentiment score of class `c` of `classes`: evenly spaced in `[-1, 1]`.
pub fn class_score(c: usize, classes: usize) -> f64 {
    -1.0 + 2.0 * c as f64 / (classes - 1) as f64
}

/// Converts head outputs `[N, out]` into sentiment scores.
fn scores_to_predictions(cfg: &ModelConfig, scores: &Tensor) -> Vec<f64> {
    match cfg.task {
        TaskKind::Regression => scores.data().to_vec(),
        TaskKind::Classification => (0..scores.rows())
            .map(|i| {
                let row = scores.row(i);
                let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                class_score(best, cfg.classes)
            })
            .collect(),
    }
}

fn target_scores(cfg: &ModelConfig, labels: &[f64]) -> Vec<f64> {
    match cfg.task {
        TaskKind::Regression => labels.to_vec(),
        TaskKind::Classification => labels.iter().map(|&y| class_score(y as usize, cfg.classes)).collect(),
    }
}

/// Full multimodal forward from raw inputs to head scores.
fn multimodal_scores(g: &mut Graph, cfg: &ModelConfig, b: &Batch) -> Result<Var> {
    let mut hidden = Vec::with_capacity(3);
    for m in ModalityId::ALL {
        let x = g.input(b.x[m.index()].clone());
        hidden.push(encode_batch(g, cfg, m, x, b.len())?.sequence);
    }
    let refined = refine_batch(g, cfg, hidden.try_into().unwrap(), b.len())?;
    let pooled = pool_refined(g, cfg, refined)?;
    let f = fuse_batch(g, cfg, pooled, b.len())?;
    classifier_forward(g, groups::MULTIMODAL_HEAD, f)
}

/// Sentiment-score predictions of a head for every record, in order.
pub fn predict(model: &MvclModel, records: &[SampleRecord], target: ClassifierTarget) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let parts: Vec<Vec<f64>> = eval_batches(records)?
        .par_iter()
        .map(|b| -> Result<Vec<f64>> {
            let mut g = Graph::frozen(&model.params);
            let scores = match target {
                ClassifierTarget::Multimodal => multimodal_scores(&mut g, cfg, b)?,
                ClassifierTarget::Unimodal(m) => {
                    let x = g.input(b.x[m.index()].clone());
                    let e = encode_batch(&mut g, cfg, m, x, b.len())?;
                    classifier_forward(&mut g, &target.head(), e.pooled)?
                }
            };
            Ok(scores_to_predictions(cfg, g.value(scores)))
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Metrics of a head on a dataset.
pub fn evaluate(model: &MvclModel, data: &Dataset, target: ClassifierTarget) -> Result<MetricReport> {
    check_data(&model.config, data)?;
    let pred = predict(model, &data.records, target)?;
    let labels: Vec<f64> = match target {
        ClassifierTarget::Multimodal => data.labels(),
        ClassifierTarget::Unimodal(m) => data.records.iter().map(|r| r.label_for(m)).collect(),
    };
    MetricReport::compute(&pred, &target_scores(&model.config, &labels))
}

fn task_loss(g: &mut Graph, cfg: &ModelConfig, scores: Var, labels: &[f64]) -> Result<Var> {
    match cfg.task {
        TaskKind::Classification => {
            let ids: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
            ce_loss(&mut g.tape, scores, &ids)
        }
        TaskKind::Regression => {
            let t = g.input(Tensor::matrix(labels.len(), 1, labels.to_vec())?);
            mse_loss(&mut g.tape, scores, t)
        }
    }
}

/// Runs one contrastive step; `Ok(None)` when the batch has no positive
/// pair.
fn try_contrastive(r: Result<Var>) -> Result<Option<Var>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateBatch) => Ok(None),
        Err(e) => Err(e),
    }
}

struct Epochs<'a> {
    rng: SeededRng,
    records: &'a [SampleRecord],
    batch_size: usize,
}

impl Epochs<'_> {
    fn next(&mut self) -> Result<Vec<Batch>> {
        let seed = self.rng.next_u64();
        let batches = make_batches(self.records, self.batch_size, seed, BatchMode::Contrastive)?;
        if batches.is_empty() {
            return Err(Error::Config(format!(
                "{} training samples cannot fill one batch of {}",
                self.records.len(),
                self.batch_size
            )));
        }
        Ok(batches)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn unimodal_supcon(g: &mut Graph, plan: &StagePlan, cfg: &ModelConfig, m: ModalityId, x: Tensor, labels: &[f64]) -> Result<Option<Var>> {
    let n = labels.len();
    let xv = g.input(x);
    let e = encode_batch(g, cfg, m, xv, n)?;
    let z = project_batch(g, &groups::unimodal_projection(m), e.pooled)?;
    let classes = contrastive_classes(labels, cfg.task, plan.label_decimals);
    try_contrastive(supcon_loss(&mut g.tape, z, &classes, &plan.contrastive()))
}

fn stage1_val_loss(model: &MvclModel, plan: &StagePlan, val: &Dataset) -> Result<f64> {
    let b = Batch::from_indices(&val.records, (0..val.len()).collect())?;
    let mut total = 0.0;
    for m in ModalityId::ALL {
        let mut g = Graph::frozen(&model.params);
        if let Some(l) = unimodal_supcon(&mut g, plan, &model.config, m, b.x[m.index()].clone(), b.labels_for(m))? {
            total += g.value(l).item();
        }
    }
    Ok(total)
}

/// Supervised contrastive training of each modality's encoder and
/// projection, each modality on its own label and optimizer.
pub fn run_stage1(ckpt: &Checkpoint, data: &Splits, plan: &StagePlan) -> Result<(Checkpoint, StageReport)> {
    plan.validate()?;
    expect_stage(ckpt, &[StageId::Init])?;
    check_splits(&ckpt.model.config, data)?;
    let spec = plan.stage(StageId::Scl1)?;
    let mut model = ckpt.model.clone();
    let cfg = model.config.clone();
    let digests = frozen_digests(&model.params, spec);
    let mut report = StageReport::new(StageId::Scl1);
    report.val_loss_before = Some(stage1_val_loss(&model, plan, &data.val)?);
    let mut opts = [0, 1, 2].map(|_| Adam::new(spec.optimizer));
    let mut epochs = Epochs {
        rng: SeededRng::from_state(ckpt.rng),
        records: &data.train.records,
        batch_size: plan.batch_size,
    };
    for _ in 0..spec.epochs {
        let mut losses = Vec::new();
        for b in epochs.next()? {
            let mut step = 0.0;
            for m in ModalityId::ALL {
                let trainable: Vec<String> = spec
                    .trainable
                    .iter()
                    .filter(|t| t.ends_with(&format!(".{m}")))
                    .cloned()
                    .collect();
                let mut g = Graph::new(&model.params, Trainable::Prefixes(trainable));
                let Some(loss) = unimodal_supcon(&mut g, plan, &cfg, m, b.x[m.index()].clone(), b.labels_for(m))? else {
                    report.skipped_batches += 1;
                    continue;
                };
                step += g.value(loss).item();
                let grads = g.param_grads(loss)?;
                opts[m.index()].step(&mut model.params, &grads)?;
            }
            losses.push(step);
        }
        report.epoch_losses.push(mean(&losses));
    }
    verify_frozen(&digests, &model.params, spec)?;
    report.val_loss_after = Some(stage1_val_loss(&model, plan, &data.val)?);
    Ok((
        Checkpoint {
            stage: StageId::Scl1,
            model,
            rng: epochs.rng.state(),
        },
        report,
    ))
}

/// Self-supervised loss and mean paired-view cosine over the given rows of
/// a frozen encoding.
fn sscl_forward(g: &mut Graph, plan: &StagePlan, cfg: &ModelConfig, enc: &EncodedSplit, idx: &[usize]) -> Result<(Var, f64)> {
    let hidden = ModalityId::ALL.map(|m| g.input(gather(&enc.sequences[m.index()], idx, cfg.input(m).seq_len)));
    let refined = refine_batch(g, cfg, hidden, idx.len())?;
    let pooled = pool_refined(g, cfg, refined)?;
    let mut total: Option<Var> = None;
    let mut agreement = 0.0;
    for m in ModalityId::ALL {
        let (s1, s2) = RefinedSlot::pair_for(m);
        let head = groups::sscl_projection(m);
        let z = project_batch(g, &head, pooled[s1.index()])?;
        let zp = project_batch(g, &head, pooled[s2.index()])?;
        let l = pairwise_sscl_loss(&mut g.tape, z, zp, &plan.contrastive())?;
        total = Some(match total {
            None => l,
            Some(t) => g.tape.add(t, l)?,
        });
        let (a, b) = (g.value(z).clone(), g.value(zp).clone());
        for i in 0..idx.len() {
            let mut t = crate::Tape::new();
            let (x, y) = (t.constant(Tensor::vector(a.row(i).to_vec())?), t.constant(Tensor::vector(b.row(i).to_vec())?));
            let c = cosine_sim(&mut t, x, y)?;
            agreement += t.value(c).item();
        }
    }
    Ok((total.expect("three modalities"), agreement / (3 * idx.len()) as f64))
}

/// Self-supervised training of the cross-modal module on frozen encoders.
pub fn run_stage2(ckpt: &Checkpoint, data: &Splits, plan: &StagePlan) -> Result<(Checkpoint, StageReport)> {
    plan.validate()?;
    expect_stage(ckpt, &[StageId::Scl1])?;
    check_splits(&ckpt.model.config, data)?;
    let spec = plan.stage(StageId::Sscl)?;
    let mut model = ckpt.model.clone();
    let cfg = model.config.clone();
    let digests = frozen_digests(&model.params, spec);
    let train = encode_split(&model, &data.train.records)?;
    let val = encode_split(&model, &data.val.records)?;
    let val_idx: Vec<usize> = (0..data.val.len()).collect();
    let val_stats = |model: &MvclModel| -> Result<(f64, f64)> {
        let mut g = Graph::frozen(&model.params);
        let (l, a) = sscl_forward(&mut g, plan, &cfg, &val, &val_idx)?;
        Ok((g.value(l).item(), a))
    };
    let mut report = StageReport::new(StageId::Sscl);
    let (l, a) = val_stats(&model)?;
    report.val_loss_before = Some(l);
    report.view_agreement_before = Some(a);
    let mut opt = Adam::new(spec.optimizer);
    let mut epochs = Epochs {
        rng: SeededRng::from_state(ckpt.rng),
        records: &data.train.records,
        batch_size: plan.batch_size,
    };
    for _ in 0..spec.epochs {
        let mut losses = Vec::new();
        for b in epochs.next()? {
            let mut g = Graph::new(&model.params, Trainable::Prefixes(spec.trainable.clone()));
            let (loss, _) = sscl_forward(&mut g, plan, &cfg, &train, &b.indices)?;
            losses.push(g.value(loss).item());
            let grads = g.param_grads(loss)?;
            opt.step(&mut model.params, &grads)?;
        }
        report.epoch_losses.push(mean(&losses));
    }
    verify_frozen(&digests, &model.params, spec)?;
    let (l, a) = val_stats(&model)?;
    report.val_loss_after = Some(l);
    report.view_agreement_after = Some(a);
    Ok((
        Checkpoint {
            stage: StageId::Sscl,
            model,
            rng: epochs.rng.state(),
        },
        report,
    ))
}

fn fused_supcon(
    g: &mut Graph,
    plan: &StagePlan,
    cfg: &ModelConfig,
    refined: &[Tensor; 6],
    idx: &[usize],
    labels: &[f64],
) -> Result<Option<Var>> {
    let p = refined.each_ref().map(|r| g.input(gather(r, idx, 1)));
    let f = fuse_batch(g, cfg, p, idx.len())?;
    let z = project_batch(g, groups::FUSED_PROJECTION, f)?;
    let classes = contrastive_classes(labels, cfg.task, plan.label_decimals);
    try_contrastive(supcon_loss(&mut g.tape, z, &classes, &plan.contrastive()))
}

/// Supervised contrastive training of the fusion and a fresh projection on
/// frozen refined representations.
pub fn run_stage3(ckpt: &Checkpoint, data: &Splits, plan: &StagePlan) -> Result<(Checkpoint, StageReport)> {
    plan.validate()?;
    expect_stage(ckpt, &[StageId::Sscl])?;
    check_splits(&ckpt.model.config, data)?;
    let spec = plan.stage(StageId::Scl2)?;
    let mut model = ckpt.model.clone();
    let cfg = model.config.clone();
    let digests = frozen_digests(&model.params, spec);
    let train = refine_split(&model, &encode_split(&model, &data.train.records)?)?;
    let val = refine_split(&model, &encode_split(&model, &data.val.records)?)?;
    let val_idx: Vec<usize> = (0..data.val.len()).collect();
    let val_labels = data.val.labels();
    let val_loss = |model: &MvclModel| -> Result<Option<f64>> {
        let mut g = Graph::frozen(&model.params);
        Ok(fused_supcon(&mut g, plan, &cfg, &val, &val_idx, &val_labels)?.map(|l| g.value(l).item()))
    };
    let mut report = StageReport::new(StageId::Scl2);
    report.val_loss_before = val_loss(&model)?;
    let mut opt = Adam::new(spec.optimizer);
    let mut epochs = Epochs {
        rng: SeededRng::from_state(ckpt.rng),
        records: &data.train.records,
        batch_size: plan.batch_size,
    };
    for _ in 0..spec.epochs {
        let mut losses = Vec::new();
        for b in epochs.next()? {
            let mut g = Graph::new(&model.params, Trainable::Prefixes(spec.trainable.clone()));
            let Some(loss) = fused_supcon(&mut g, plan, &cfg, &train, &b.indices, &b.y)? else {
                report.skipped_batches += 1;
                continue;
            };
            losses.push(g.value(loss).item());
            let grads = g.param_grads(loss)?;
            opt.step(&mut model.params, &grads)?;
        }
        report.epoch_losses.push(mean(&losses));
    }
    verify_frozen(&digests, &model.params, spec)?;
    report.val_loss_after = val_loss(&model)?;
    Ok((
        Checkpoint {
            stage: StageId::Scl2,
            model,
            rng: epochs.rng.state(),
        },
        report,
    ))
}

/// Trains one classifier head.
///
/// A unimodal head learns on the frozen pooled encoder output of its
/// modality. The multimodal head learns jointly with the encoders, the
/// cross-modal module and the fusion, which are finetuned.
pub fn train_classifier(
    ckpt: &Checkpoint,
    data: &Splits,
    plan: &StagePlan,
    target: ClassifierTarget,
) -> Result<(Checkpoint, StageReport)> {
    plan.validate()?;
    let after = [StageId::Scl2, StageId::ClsUnimodal];
    let (id, trainable) = match target {
        ClassifierTarget::Unimodal(m) => {
            expect_stage(ckpt, &after)?;
            (StageId::ClsUnimodal, vec![groups::unimodal_head(m)])
        }
        ClassifierTarget::Multimodal => {
            expect_stage(ckpt, &after)?;
            (StageId::ClsMultimodal, plan.stage(StageId::ClsMultimodal)?.trainable.clone())
        }
    };
    check_splits(&ckpt.model.config, data)?;
    let spec = plan.stage(id)?;
    let head = target.head();
    if !spec.trainable.contains(&head) {
        return Err(Error::Config(format!("{id} does not train head {head}")));
    }
    let mut model = ckpt.model.clone();
    let cfg = model.config.clone();
    let frozen: Vec<String> = all_groups().into_iter().filter(|g| !trainable.contains(g)).collect();
    let digests: Vec<[u8; 32]> = frozen.iter().map(|g| model.params.digest(g)).collect();
    let mut report = StageReport::new(id);
    let cached = match target {
        ClassifierTarget::Unimodal(m) => Some(encode_split(&model, &data.train.records)?.pooled[m.index()].clone()),
        ClassifierTarget::Multimodal => {
            report.metrics_before = Some(evaluate(&model, &data.test, target)?);
            None
        }
    };
    let mut opt = Adam::new(spec.optimizer);
    let mut epochs = Epochs {
        rng: SeededRng::from_state(ckpt.rng),
        records: &data.train.records,
        batch_size: plan.batch_size,
    };
    for _ in 0..spec.epochs {
        let mut losses = Vec::new();
        for b in epochs.next()? {
            let mut g = Graph::new(&model.params, Trainable::Prefixes(trainable.clone()));
            let (scores, labels) = match target {
                ClassifierTarget::Unimodal(m) => {
                    let x = g.input(gather(cached.as_ref().unwrap(), &b.indices, 1));
                    (classifier_forward(&mut g, &head, x)?, b.labels_for(m).to_vec())
                }
                ClassifierTarget::Multimodal => (multimodal_scores(&mut g, &cfg, &b)?, b.y.clone()),
            };
            let loss = task_loss(&mut g, &cfg, scores, &labels)?;
            losses.push(g.value(loss).item());
            let grads = g.param_grads(loss)?;
            opt.step(&mut model.params, &grads)?;
        }
        report.epoch_losses.push(mean(&losses));
    }
    for (g, d) in frozen.iter().zip(&digests) {
        if model.params.digest(g) != *d {
            return Err(Error::Corrupt(format!("{id}: frozen group {g} changed")));
        }
    }
    match target {
        ClassifierTarget::Unimodal(m) => {
            report.unimodal_metrics.push((m, evaluate(&model, &data.test, target)?));
        }
        ClassifierTarget::Multimodal => report.metrics_after = Some(evaluate(&model, &data.test, target)?),
    }
    Ok((
        Checkpoint {
            stage: id,
            model,
            rng: epochs.rng.state(),
        },
        report,
    ))
}

/// Trains the three unimodal heads in `t, a, v` order.
pub fn train_unimodal_heads(ckpt: &Checkpoint, data: &Splits, plan: &StagePlan) -> Result<(Checkpoint, StageReport)> {
    let mut cur = ckpt.clone();
    let mut report = StageReport::new(StageId::ClsUnimodal);
    for m in ModalityId::ALL {
        let (next, r) = train_classifier(&cur, data, plan, ClassifierTarget::Unimodal(m))?;
        report.epoch_losses.extend(r.epoch_losses);
        report.unimodal_metrics.extend(r.unimodal_metrics);
        cur = next;
    }
    Ok((cur, report))
}

/// Runs the phase `id` on the checkpoint of the phase before it.
pub fn run_stage(id: StageId, ckpt: &Checkpoint, data: &Splits, plan: &StagePlan) -> Result<(Checkpoint, StageReport)> {
    match id {
        StageId::Init => Err(Error::Config("init is not a training phase".into())),
        StageId::Scl1 => run_stage1(ckpt, data, plan),
        StageId::Sscl => run_stage2(ckpt, data, plan),
        StageId::Scl2 => run_stage3(ckpt, data, plan),
        StageId::ClsUnimodal => train_unimodal_heads(ckpt, data, plan),
        StageId::ClsMultimodal => train_classifier(ckpt, data, plan, ClassifierTarget::Multimodal),
    }
}

/// Outcome of all phases.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub checkpoints: Vec<Checkpoint>,
    pub reports: Vec<StageReport>,
    /// Multimodal test metrics after the final phase.
    pub metrics: MetricReport,
    /// Multimodal test MAE with the head still at initialization.
    pub untrained_mae: f64,
}

impl PipelineRun {
    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("at least one phase")
    }
}

/// Runs every phase from a fresh model. `on_stage` sees each checkpoint and
/// report as soon as its phase ends.
pub fn run_pipeline(
    config: ModelConfig,
    seed: u64,
    data: &Splits,
    plan: &StagePlan,
    mut on_stage: impl FnMut(&Checkpoint, &StageReport) -> Result<()>,
) -> Result<PipelineRun> {
    plan.validate()?;
    let mut ckpt = Checkpoint::initial(config, seed)?;
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    for id in StageId::TRAINING {
        let (next, report) = run_stage(id, &ckpt, data, plan)?;
        on_stage(&next, &report)?;
        checkpoints.push(next.clone());
        reports.push(report);
        ckpt = next;
    }
    let last = reports.last().expect("five phases");
    let metrics = last.metrics_after.expect("multimodal phase reports metrics");
    let untrained_mae = last.metrics_before.expect("multimodal phase reports metrics").mae;
    Ok(PipelineRun {
        checkpoints,
        reports,
        metrics,
        untrained_mae,
    })
}

/// Pooled projection of the fused representation through the stage-3
/// head, for every record.
pub fn fused_projections(model: &MvclModel, records: &[SampleRecord]) -> Result<Tensor> {
    let refined = refine_split(model, &encode_split(model, records)?)?;
    let f = fuse_split(model, &refined)?;
    let mut g = Graph::frozen(&model.params);
    let x = g.input(f);
    let z = layers::mlp(&mut g, groups::FUSED_PROJECTION, x)?;
    Ok(g.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::model::ModalityShape;

    fn tiny_data(seed: u64) -> Splits {
        generate_synthetic(&SynthConfig {
            train: 24,
            val: 8,
            test: 8,
            shapes: [
                ModalityShape { seq_len: 3, dim: 4 },
                ModalityShape { seq_len: 2, dim: 3 },
                ModalityShape { seq_len: 2, dim: 5 },
            ],
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_config(d: &Splits) -> ModelConfig {
        let mut c = ModelConfig::desk(d.train.header.shapes, TaskKind::Regression, 0);
        c.model_dim = 8;
        c.num_heads = 2;
        c.ffn_dim = 8;
        c.projection_dim = 4;
        c.classifier_hidden = 8;
        c.num_layers = 1;
        c
    }

    fn tiny_plan(epochs: usize) -> StagePlan {
        StagePlan::standard(&TrainConfig {
            batch_size: 8,
            epochs_scl1: epochs,
            epochs_sscl: epochs,
            epochs_scl2: epochs,
            epochs_cls: epochs,
            ..TrainConfig::default()
        })
    }

    #[test]
    fn standard_plan_is_valid() {
        tiny_plan(1).validate().unwrap();
        StagePlan::standard(&TrainConfig::paper()).validate().unwrap();
    }

    #[test]
    fn plan_rejects_unfrozen_encoders_in_sscl() {
        let mut p = tiny_plan(1);
        p.stages[1].trainable.push(groups::encoder(ModalityId::Text));
        p.stages[1].frozen.retain(|g| g != "enc.t");
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let mut p = tiny_plan(1);
        p.stages.swap(0, 1);
        assert!(p.validate().is_err());
        let mut p = tiny_plan(1);
        p.batch_size = 1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -1.0]).unwrap());
        let mut a = Adam::new(OptimizerSettings::default());
        let g = vec![("w".to_string(), Tensor::vector(vec![0.5, -2.0]).unwrap())];
        a.step(&mut store, &g).unwrap();
        let w = store.get("w").unwrap().data().to_vec();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn adam_clips_global_norm() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.0]).unwrap());
        let settings = OptimizerSettings {
            clip_norm: 1.0,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            lr: 1.0,
        };
        let mut a = Adam::new(settings);
        let norm = a
            .step(&mut store, &[("w".into(), Tensor::vector(vec![10.0]).unwrap())])
            .unwrap();
        assert_eq!(norm, 10.0);
        // With both betas zero the step is lr · sign(g) regardless of scale.
        assert_eq!(store.get("w").unwrap().data(), &[-1.0]);
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let d = tiny_data(1);
        let ck = Checkpoint::initial(tiny_config(&d), 3).unwrap();
        let (next, report) = run_stage1(&ck, &d, &tiny_plan(0)).unwrap();
        assert_eq!(next.model.params, ck.model.params);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn stages_enforce_order() {
        let d = tiny_data(1);
        let ck = Checkpoint::initial(tiny_config(&d), 3).unwrap();
        assert!(run_stage2(&ck, &d, &tiny_plan(0)).is_err());
        assert!(run_stage3(&ck, &d, &tiny_plan(0)).is_err());
        assert!(train_classifier(&ck, &d, &tiny_plan(0), ClassifierTarget::Multimodal).is_err());
    }

    #[test]
    fn task_mismatch_is_reported() {
        let d = tiny_data(1);
        let mut c = tiny_config(&d);
        c.task = TaskKind::Classification;
        c.classes = 2;
        let ck = Checkpoint::initial(c, 3).unwrap();
        assert!(matches!(run_stage1(&ck, &d, &tiny_plan(0)), Err(Error::TaskMismatch(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let d = tiny_data(2);
        let c = tiny_config(&d);
        let ck = Checkpoint::initial(c.clone(), 4).unwrap();
        let bytes = ck.encode();
        assert_eq!(Checkpoint::decode(&bytes, &c).unwrap(), ck);
        let mut other = c.clone();
        other.ffn_dim = 16;
        assert!(matches!(Checkpoint::decode(&bytes, &other), Err(Error::FingerprintMismatch)));
        let mut v2 = bytes.clone();
        v2[6] = 2;
        assert!(matches!(Checkpoint::decode(&v2, &c), Err(Error::VersionMismatch { found: 2, .. })));
        for cut in [bytes.len() - 1, bytes.len() / 2, 50] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut], &c), Err(Error::Corrupt(_))));
        }
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(Checkpoint::decode(&flipped, &c), Err(Error::Corrupt(_))));
    }

    #[test]
    fn full_pipeline_is_deterministic_and_respects_freezing() {
        let d = tiny_data(3);
        let c = tiny_config(&d);
        let plan = tiny_plan(1);
        let mut seen = Vec::new();
        let a = run_pipeline(c.clone(), 5, &d, &plan, |ck, _| {
            seen.push(ck.stage);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, StageId::TRAINING.to_vec());
        let b = run_pipeline(c, 5, &d, &plan, |_, _| Ok(())).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.last().model.params, b.last().model.params);
        let digest = |i: usize, g: &str| a.checkpoints[i].model.params.digest(g);
        for m in ModalityId::ALL {
            let e = groups::encoder(m);
            assert_eq!(digest(0, &e), digest(1, &e));
            assert_eq!(digest(1, &e), digest(2, &e));
            assert_eq!(digest(2, &e), digest(3, &e));
            assert_ne!(digest(3, &e), digest(4, &e));
        }
        assert_eq!(digest(1, "cross"), digest(2, "cross"));
        assert_eq!(digest(2, "fusion"), digest(3, "fusion"));
    }

    #[test]
    fn fused_projection_is_off_the_classifier_path() {
        let d = tiny_data(4);
        let ck = Checkpoint::initial(tiny_config(&d), 6).unwrap();
        let before = predict(&ck.model, &d.test.records, ClassifierTarget::Multimodal).unwrap();
        let mut m = ck.model.clone();
        m.params.remove_prefix(groups::FUSED_PROJECTION);
        m.params.remove_prefix(groups::SSCL_PROJECTION);
        for mm in ModalityId::ALL {
            m.params.remove_prefix(&groups::unimodal_projection(mm));
        }
        let after = predict(&m, &d.test.records, ClassifierTarget::Multimodal).unwrap();
        assert_eq!(before, after);
    }
}
