//! Synthetic multimodal datasets, the `MVCL1` feature file format, and
//! batching.
//!
//! Feature values are stored as `f32` on disk and held as `f64` in memory.
//! The generator rounds every value through `f32`, so a dataset written and
//! read back compares equal bit for bit.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::score_classes;
use crate::model::{ModalityId, ModalityShape, TaskKind};
use crate::numerics::{SeededRng, Tensor};

const MAGIC: &[u8; 6] = b"MVCL1\n";
const HEADER_LEN: usize = 6 + 4 * 7 + 1 + 4 + 1;

/// One sample: three feature sequences and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `[L_m, d_m]` in `t, a, v` order.
    pub x: [Tensor; 3],
    /// Per-modality labels in `t, a, v` order; present only in multi-task
    /// datasets.
    pub y_m: Option<[f64; 3]>,
    /// Multimodal label: a class id for classification, a score for
    /// regression.
    pub y: f64,
}

impl SampleRecord {
    pub fn input(&self, m: ModalityId) -> &Tensor {
        &self.x[m.index()]
    }

    /// Label used to train modality `m` alone: its own label when present,
    /// else the shared one.
    pub fn label_for(&self, m: ModalityId) -> f64 {
        self.y_m.map_or(self.y, |l| l[m.index()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n: usize,
    pub shapes: [ModalityShape; 3],
    pub task: TaskKind,
    /// 0 for regression.
    pub classes: usize,
    pub multi_task: bool,
}

impl DatasetHeader {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("dataset must hold at least one sample".into()));
        }
        if self.shapes.iter().any(|s| s.seq_len == 0 || s.dim == 0) {
            return Err(Error::Config("sequence lengths and widths must be >= 1".into()));
        }
        match self.task {
            TaskKind::Classification if self.classes < 2 => {
                Err(Error::Config("classification needs at least 2 classes".into()))
            }
            TaskKind::Regression if self.classes != 0 => {
                Err(Error::Config("regression datasets carry class count 0".into()))
            }
            _ => Ok(()),
        }
    }

    fn record_len(&self) -> usize {
        let labels = if self.multi_task { 4 } else { 1 };
        4 * (labels + self.shapes.iter().map(|s| s.seq_len * s.dim).sum::<usize>())
    }

    fn check_record(&self, index: usize, r: &SampleRecord) -> Result<()> {
        for m in ModalityId::ALL {
            let s = self.shapes[m.index()];
            if r.input(m).shape() != [s.seq_len, s.dim] {
                return Err(Error::ShapeMismatch(format!(
                    "record {index} modality {m} has shape {:?}, header says [{}, {}]",
                    r.input(m).shape(),
                    s.seq_len,
                    s.dim
                )));
            }
        }
        if r.y_m.is_some() != self.multi_task {
            return Err(Error::ShapeMismatch(format!(
                "record {index} per-modality labels do not match the multi-task flag"
            )));
        }
        if self.task == TaskKind::Classification {
            let labels = std::iter::once(r.y).chain(r.y_m.into_iter().flatten());
            for y in labels {
                if y < 0.0 || y.fract() != 0.0 || y as usize >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label: y.max(0.0) as usize,
                        classes: self.classes,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    /// Builds a dataset, checking every record against the header.
    pub fn new(header: DatasetHeader, records: Vec<SampleRecord>) -> Result<Self> {
        header.validate()?;
        if header.n != records.len() {
            return Err(Error::CountMismatch {
                expected: header.n,
                found: records.len(),
            });
        }
        for (i, r) in records.iter().enumerate() {
            header.check_record(i, r)?;
        }
        Ok(Self { header, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub task: TaskKind,
    pub multi_task: bool,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// `t, a, v` order.
    pub shapes: [ModalityShape; 3],
    /// Standard deviation of the per-class mean vectors.
    pub mu: f64,
    /// Standard deviation of the per-position noise.
    pub sigma: f64,
    /// Probability that a modality's latent class equals the sample's label.
    pub rho: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            task: TaskKind::Regression,
            multi_task: false,
            train: 600,
            val: 200,
            test: 200,
            shapes: [
                ModalityShape { seq_len: 5, dim: 12 },
                ModalityShape { seq_len: 4, dim: 8 },
                ModalityShape { seq_len: 3, dim: 10 },
            ],
            mu: 1.0,
            sigma: 0.1,
            rho: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("synthetic data needs >= 2 classes, got {}", self.classes)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() || !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::Config("mu and sigma must be finite and non-negative".into()));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config("every split needs at least one sample".into()));
        }
        if self.shapes.iter().any(|s| s.seq_len == 0 || s.dim == 0) {
            return Err(Error::Config("sequence lengths and widths must be >= 1".into()));
        }
        Ok(())
    }

    fn header(&self, n: usize) -> DatasetHeader {
        DatasetHeader {
            n,
            shapes: self.shapes,
            task: self.task,
            classes: match self.task {
                TaskKind::Classification => self.classes,
                TaskKind::Regression => 0,
            },
            multi_task: self.multi_task,
        }
    }

    /// Label value of class `c`: the id itself, or an evenly spaced score in
    /// `[-1, 1]` for regression.
    pub fn label_of(&self, c: usize) -> f64 {
        match self.task {
            TaskKind::Classification => c as f64,
            TaskKind::Regression => -1.0 + 2.0 * c as f64 / (self.classes - 1) as f64,
        }
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Draws train, validation and test splits.
///
/// Each class `c` and modality `m` owns a mean vector `μ_{c,m}`. A sample
/// with label `y` picks, per modality, the latent class `c' = y` with
/// probability `ρ` and a uniformly random other class otherwise, then
/// repeats `μ_{c',m}` over the sequence and adds Gaussian noise of scale
/// `σ`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Splits> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let mut mean_rng = root.fork(1);
    let means: Vec<[Vec<f64>; 3]> = (0..cfg.classes)
        .map(|_| ModalityId::ALL.map(|m| mean_rng.normal_vec(cfg.shapes[m.index()].dim, cfg.mu)))
        .collect();
    let split = |n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = root.fork(stream);
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.below(cfg.classes);
            let mut latent = [y; 3];
            let mut x = Vec::with_capacity(3);
            for m in ModalityId::ALL {
                let c = if rng.uniform() < cfg.rho {
                    y
                } else {
                    (y + 1 + rng.below(cfg.classes - 1)) % cfg.classes
                };
                latent[m.index()] = c;
                let s = cfg.shapes[m.index()];
                let mut data = Vec::with_capacity(s.seq_len * s.dim);
                for _ in 0..s.seq_len {
                    for &mu in &means[c][m.index()] {
                        data.push(round_f32(mu + cfg.sigma * rng.normal()));
                    }
                }
                x.push(Tensor::matrix(s.seq_len, s.dim, data)?);
            }
            records.push(SampleRecord {
                x: x.try_into().expect("three modalities"),
                y_m: cfg.multi_task.then(|| latent.map(|c| round_f32(cfg.label_of(c)))),
                y: round_f32(cfg.label_of(y)),
            });
        }
        Dataset::new(cfg.header(n), records)
    };
    Ok(Splits {
        train: split(cfg.train, 2)?,
        val: split(cfg.val, 3)?,
        test: split(cfg.test, 4)?,
    })
}

/// Serializes a dataset to `MVCL1` bytes.
pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let h = &d.header;
    h.validate()?;
    if h.n != d.records.len() {
        return Err(Error::CountMismatch {
            expected: h.n,
            found: d.records.len(),
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + h.n * h.record_len());
    out.extend_from_slice(MAGIC);
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in u32")))
    };
    out.extend_from_slice(&u32_of(h.n, "sample count")?.to_le_bytes());
    for s in &h.shapes {
        out.extend_from_slice(&u32_of(s.seq_len, "sequence length")?.to_le_bytes());
        out.extend_from_slice(&u32_of(s.dim, "feature width")?.to_le_bytes());
    }
    out.push(match h.task {
        TaskKind::Classification => 0,
        TaskKind::Regression => 1,
    });
    out.extend_from_slice(&u32_of(h.classes, "class count")?.to_le_bytes());
    out.push(h.multi_task as u8);
    for (i, r) in d.records.iter().enumerate() {
        h.check_record(i, r)?;
        let labels = r.y_m.into_iter().flatten().chain(std::iter::once(r.y));
        for v in labels.chain(r.x.iter().flat_map(|t| t.data().iter().copied())) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, record: Option<usize>) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { record });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, None)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4, None)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize, record: usize) -> Result<Vec<f64>> {
        let b = self.take(4 * n, Some(record))?;
        b.chunks_exact(4)
            .map(|c| {
                let v = f32::from_le_bytes(c.try_into().unwrap());
                if v.is_finite() {
                    Ok(f64::from(v))
                } else {
                    Err(Error::Corrupt(format!("record {record} holds a non-finite value")))
                }
            })
            .collect()
    }
}

/// Parses `MVCL1` bytes.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic { expected: "MVCL1" });
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let n = r.u32()?;
    let mut shapes = [ModalityShape { seq_len: 0, dim: 0 }; 3];
    for s in &mut shapes {
        s.seq_len = r.u32()?;
        s.dim = r.u32()?;
    }
    let task = match r.u8()? {
        0 => TaskKind::Classification,
        1 => TaskKind::Regression,
        t => return Err(Error::Corrupt(format!("unknown task byte {t}"))),
    };
    let classes = r.u32()?;
    let multi_task = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Corrupt(format!("multi-task flag byte {b}"))),
    };
    let header = DatasetHeader {
        n,
        shapes,
        task,
        classes,
        multi_task,
    };
    header.validate().map_err(|e| Error::Corrupt(format!("invalid header: {e}")))?;
    let body = bytes.len() - HEADER_LEN;
    let expected = n
        .checked_mul(header.record_len())
        .ok_or_else(|| Error::Corrupt("record table size overflows".into()))?;
    if body > expected {
        let extra = body - expected;
        return Err(Error::CountMismatch {
            expected: n,
            found: n + extra.div_ceil(header.record_len()),
        });
    }
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let y_m = if multi_task {
            let l = r.f32s(3, i)?;
            Some([l[0], l[1], l[2]])
        } else {
            None
        };
        let y = r.f32s(1, i)?[0];
        let mut x = Vec::with_capacity(3);
        for s in &shapes {
            x.push(Tensor::matrix(s.seq_len, s.dim, r.f32s(s.seq_len * s.dim, i)?)?);
        }
        records.push(SampleRecord {
            x: x.try_into().expect("three modalities"),
            y_m,
            y,
        });
    }
    Dataset::new(header, records)
}

pub fn write_dataset(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    let bytes = encode_dataset(d)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled; the final short batch is dropped.
    Contrastive,
    /// Original order; the final short batch is kept.
    Evaluation,
}

/// Stacked inputs and labels of consecutive samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Record indices in batch order.
    pub indices: Vec<usize>,
    /// `[size * L_m, d_m]` per modality, samples contiguous.
    pub x: [Tensor; 3],
    pub y: Vec<f64>,
    /// Per-modality labels, `t, a, v` order.
    pub y_m: Option<[Vec<f64>; 3]>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn from_indices(records: &[SampleRecord], indices: Vec<usize>) -> Result<Self> {
        let x = ModalityId::ALL.map(|m| {
            let parts: Vec<Tensor> = indices.iter().map(|&i| records[i].input(m).clone()).collect();
            Tensor::stack_rows(&parts)
        });
        let [xt, xa, xv] = x;
        let y = indices.iter().map(|&i| records[i].y).collect();
        let y_m = records[indices[0]]
            .y_m
            .is_some()
            .then(|| ModalityId::ALL.map(|m| indices.iter().map(|&i| records[i].label_for(m)).collect()));
        Ok(Self {
            x: [xt?, xa?, xv?],
            indices,
            y,
            y_m,
        })
    }

    /// Labels for training modality `m` alone.
    pub fn labels_for(&self, m: ModalityId) -> &[f64] {
        self.y_m.as_ref().map_or(&self.y, |l| &l[m.index()])
    }
}

/// Splits `records` into batches of `batch_size`.
pub fn make_batches(records: &[SampleRecord], batch_size: usize, seed: u64, mode: BatchMode) -> Result<Vec<Batch>> {
    if batch_size == 0 || (mode == BatchMode::Contrastive && batch_size < 2) {
        return Err(Error::Config(format!(
            "batch size {batch_size} too small for {mode:?} batching"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    if mode == BatchMode::Contrastive {
        SeededRng::new(seed).shuffle(&mut order);
    }
    order
        .chunks(batch_size)
        .filter(|c| mode == BatchMode::Evaluation || c.len() == batch_size)
        .map(|c| Batch::from_indices(records, c.to_vec()))
        .collect()
}

/// Class ids for contrastive training: label values as ids for
/// classification, rounded-score equality classes for regression.
pub fn contrastive_classes(labels: &[f64], task: TaskKind, decimals: u32) -> Vec<usize> {
    match task {
        TaskKind::Classification => labels.iter().map(|&y| y as usize).collect(),
        TaskKind::Regression => score_classes(labels, decimals),
    }
}

/// Mean over positions of every record's modality-`m` sequence.
pub fn mean_pooled_features(records: &[SampleRecord], m: ModalityId) -> Vec<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            let x = r.input(m);
            let mut acc = vec![0.0; x.cols()];
            for i in 0..x.rows() {
                acc.iter_mut().zip(x.row(i)).for_each(|(a, v)| *a += v);
            }
            acc.iter().map(|a| a / x.rows() as f64).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            train: 10,
            val: 4,
            test: 4,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small(3)).unwrap();
        let b = generate_synthetic(&small(3)).unwrap();
        assert_eq!(encode_dataset(&a.train).unwrap(), encode_dataset(&b.train).unwrap());
        let c = generate_synthetic(&small(4)).unwrap();
        assert_ne!(encode_dataset(&a.train).unwrap(), encode_dataset(&c.train).unwrap());
    }

    #[test]
    fn noiseless_classes_are_identical() {
        let cfg = SynthConfig {
            sigma: 0.0,
            train: 40,
            ..small(1)
        };
        let d = generate_synthetic(&cfg).unwrap().train;
        for a in &d.records {
            for b in &d.records {
                assert_eq!(a.y == b.y, a.x == b.x);
            }
        }
    }

    #[test]
    fn multi_task_labels_follow_latent_class() {
        let cfg = SynthConfig {
            multi_task: true,
            rho: 0.0,
            task: TaskKind::Classification,
            classes: 3,
            train: 30,
            ..small(2)
        };
        let d = generate_synthetic(&cfg).unwrap().train;
        for r in &d.records {
            let l = r.y_m.unwrap();
            assert!(l.iter().all(|&c| c != r.y));
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = SynthConfig {
            multi_task: true,
            ..small(5)
        };
        let d = generate_synthetic(&cfg).unwrap().train;
        let back = decode_dataset(&encode_dataset(&d).unwrap()).unwrap();
        assert_eq!(back, d);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.mvcl");
        write_dataset(&p, &d).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), d);
    }

    #[test]
    fn decode_errors() {
        let d = generate_synthetic(&small(6)).unwrap().train;
        let bytes = encode_dataset(&d).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_dataset(&bytes[..20]), Err(Error::Truncated { record: None })));
        let rec = d.header.record_len();
        let cut = HEADER_LEN + 3 * rec + rec / 2;
        assert!(matches!(decode_dataset(&bytes[..cut]), Err(Error::Truncated { record: Some(3) })));
        let mut long = bytes.clone();
        long.extend_from_slice(&bytes[HEADER_LEN..HEADER_LEN + rec]);
        assert!(matches!(
            decode_dataset(&long),
            Err(Error::CountMismatch { expected: 10, found: 11 })
        ));
    }

    #[test]
    fn encode_rejects_inconsistent_records() {
        let mut d = generate_synthetic(&small(7)).unwrap().train;
        d.records[2].x[1] = Tensor::zeros(&[2, 2]);
        assert!(matches!(encode_dataset(&d), Err(Error::ShapeMismatch(_))));
        let mut d = generate_synthetic(&small(7)).unwrap().train;
        d.records.pop();
        assert!(matches!(encode_dataset(&d), Err(Error::CountMismatch { .. })));
    }

    #[test]
    fn batch_counts() {
        let d = generate_synthetic(&small(8)).unwrap().train;
        let c = make_batches(&d.records, 4, 1, BatchMode::Contrastive).unwrap();
        assert_eq!(c.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4]);
        let e = make_batches(&d.records, 4, 1, BatchMode::Evaluation).unwrap();
        assert_eq!(e.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let all: Vec<usize> = e.iter().flat_map(|b| b.indices.clone()).collect();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(matches!(
            make_batches(&d.records, 1, 1, BatchMode::Contrastive),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batches_are_seeded() {
        let d = generate_synthetic(&small(9)).unwrap().train;
        let a = make_batches(&d.records, 3, 5, BatchMode::Contrastive).unwrap();
        let b = make_batches(&d.records, 3, 5, BatchMode::Contrastive).unwrap();
        assert_eq!(a, b);
        let mut seen: Vec<usize> = a.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn batch_stacks_samples_contiguously() {
        let d = generate_synthetic(&small(10)).unwrap().train;
        let b = Batch::from_indices(&d.records, vec![3, 1]).unwrap();
        assert_eq!(b.x[0].shape(), &[10, 12]);
        assert_eq!(b.x[0].slice_rows(5, 5).unwrap(), d.records[1].x[0]);
        assert_eq!(b.y, vec![d.records[3].y, d.records[1].y]);
    }

    #[test]
    fn regression_classes_by_rounding() {
        let c = contrastive_classes(&[1.0, -1.0, 1.0], TaskKind::Regression, 1);
        assert_eq!(c, vec![1, 0, 1]);
        let c = contrastive_classes(&[2.0, 0.0], TaskKind::Classification, 1);
        assert_eq!(c, vec![2, 0]);
    }
}
