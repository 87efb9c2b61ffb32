//! Training objectives.
//!
//! Both contrastive losses are expressed over a temperature-scaled cosine
//! similarity matrix `S`, so each reduces to row-wise log-sum-exps minus a
//! weighted sum of selected entries of `S`:
//!
//! - supervised: for anchor `i` with positives `P(i)` (same label, `≠ i`),
//!   `lse_{j≠i} S_ij − mean_{p∈P(i)} S_ip`;
//! - pairwise self-supervised: the two views are stacked into `2N` rows and
//!   anchor `r` with counterpart `r'` contributes `lse_{c≠r} S_rc − S_rr'`.
//!   Excluding only the anchor itself reproduces both denominator sums (all
//!   cross-view entries including the positive, plus same-view entries
//!   other than the anchor).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::layers::Init;
use crate::numerics::{Graph, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over anchors.
    Sum,
    /// Sum divided by the number of contributing anchors.
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub reduction: Reduction,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            reduction: Reduction::Mean,
        }
    }
}

impl ContrastiveConfig {
    pub fn sum(temperature: f64) -> Self {
        Self {
            temperature,
            reduction: Reduction::Sum,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// `S = normalize(z) · normalize(z)ᵀ / τ`.
fn similarity_matrix(tape: &mut Tape, z: Var, temperature: f64) -> Result<Var> {
    let zn = tape.l2_normalize_rows(z)?;
    let zt = tape.transpose(zn)?;
    let s = tape.matmul(zn, zt)?;
    tape.scale(s, 1.0 / temperature)
}

fn off_diagonal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k / n != k % n).collect()
}

/// Supervised contrastive loss over the rows of `z: [N, P]`.
///
/// Anchors without a positive are skipped; the batch is degenerate only if
/// every anchor is skipped.
pub fn supcon_loss(tape: &mut Tape, z: Var, labels: &[usize], cfg: &ContrastiveConfig) -> Result<Var> {
    cfg.check()?;
    let (n, _) = tape.value(z).dims2("supcon_loss")?;
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            op: "supcon_loss",
            left: n,
            right: labels.len(),
        });
    }
    if n < 2 {
        return Err(Error::BatchTooSmall { n });
    }
    let mut lse_w = vec![0.0; n];
    let mut pos_w = vec![0.0; n * n];
    let mut anchors = 0usize;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        lse_w[i] = 1.0;
        let w = 1.0 / positives.len() as f64;
        for p in positives {
            pos_w[i * n + p] = -w;
        }
    }
    if anchors == 0 {
        return Err(Error::DegenerateBatch);
    }
    let s = similarity_matrix(tape, z, cfg.temperature)?;
    let lse = tape.masked_logsumexp_rows(s, off_diagonal_mask(n))?;
    let a = tape.weighted_sum(lse, lse_w)?;
    let b = tape.weighted_sum(s, pos_w)?;
    let total = tape.add(a, b)?;
    reduce(tape, total, anchors, cfg.reduction)
}

fn reduce(tape: &mut Tape, total: Var, anchors: usize, reduction: Reduction) -> Result<Var> {
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => tape.scale(total, 1.0 / anchors as f64),
    }
}

/// Self-supervised loss between two views `z, z′: [N, P]` of the same
/// samples: row `i` of `z` is the positive of row `i` of `z′` and vice
/// versa.
pub fn pairwise_sscl_loss(tape: &mut Tape, z: Var, z_prime: Var, cfg: &ContrastiveConfig) -> Result<Var> {
    cfg.check()?;
    let (n, p) = tape.value(z).dims2("pairwise_sscl_loss")?;
    let (n2, p2) = tape.value(z_prime).dims2("pairwise_sscl_loss")?;
    if n != n2 || p != p2 {
        return Err(Error::LengthMismatch {
            op: "pairwise_sscl_loss",
            left: n,
            right: n2,
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput {
            op: "pairwise_sscl_loss",
        });
    }
    let u = tape.concat_rows(&[z, z_prime])?;
    let s = similarity_matrix(tape, u, cfg.temperature)?;
    let m = 2 * n;
    let lse = tape.masked_logsumexp_rows(s, off_diagonal_mask(m))?;
    let mut pos_w = vec![0.0; m * m];
    for r in 0..m {
        let counterpart = if r < n { r + n } else { r - n };
        pos_w[r * m + counterpart] = -1.0;
    }
    let a = tape.weighted_sum(lse, vec![1.0; m])?;
    let b = tape.weighted_sum(s, pos_w)?;
    let total = tape.add(a, b)?;
    reduce(tape, total, m, cfg.reduction)
}

/// Sum of the pairwise losses of the text, acoustic and vision view pairs.
pub fn sscl_total(tape: &mut Tape, pairs: [(Var, Var); 3], cfg: &ContrastiveConfig) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (z, zp) in pairs {
        let l = pairwise_sscl_loss(tape, z, zp, cfg)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("three pairs"))
}

/// Mean cross-entropy of softmax(`scores: [N, C]`) against class ids.
pub fn ce_loss(tape: &mut Tape, scores: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.value(scores).dims2("ce_loss")?;
    if c < 2 {
        return Err(Error::Shape {
            op: "ce_loss",
            detail: format!("need at least 2 classes, got {c}"),
        });
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            op: "ce_loss",
            left: n,
            right: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput { op: "ce_loss" });
    }
    let mut pick = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        pick[i * c + y] = -1.0;
    }
    // -log softmax(s)_y = logsumexp(s) - s_y
    let lse = tape.masked_logsumexp_rows(scores, vec![true; n * c])?;
    let a = tape.sum(lse)?;
    let b = tape.weighted_sum(scores, pick)?;
    let total = tape.add(a, b)?;
    tape.scale(total, 1.0 / n as f64)
}

/// `(1/N) Σ (pred_i − target_i)²`.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (np, nt) = (tape.value(pred).len(), tape.value(target).len());
    if np != nt {
        return Err(Error::LengthMismatch {
            op: "mse_loss",
            left: np,
            right: nt,
        });
    }
    if np == 0 {
        return Err(Error::EmptyInput { op: "mse_loss" });
    }
    let shape = tape.shape(pred).to_vec();
    let t = tape.reshape(target, &shape)?;
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / np as f64)
}

/// Output MLP: `W_o · ReLU(W_f · x + b_f) + b_o`, raw scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `[input, hidden]`
    pub w_f: Tensor,
    pub b_f: Tensor,
    /// `[hidden, out]`
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl ClassifierHead {
    pub fn from_store(params: &crate::numerics::ParamStore, prefix: &str) -> Result<Self> {
        let p = |leaf: &str| params.get(&format!("{prefix}.{leaf}")).cloned();
        Ok(Self {
            w_f: p("wf")?,
            b_f: p("bf")?,
            w_o: p("wo")?,
            b_o: p("bo")?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.w_o.cols()
    }

    /// Scores for a single input vector.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rows = if x.rank() == 1 { 1 } else { x.rows() };
        let input = tape.constant(x.reshape(&[rows, x.cols()])?);
        let vars = [&self.w_f, &self.b_f, &self.w_o, &self.b_o].map(|t| tape.constant(t.clone()));
        let y = classifier_forward_vars(&mut tape, vars, input)?;
        if x.rank() == 1 {
            tape.value(y).reshape(&[self.out_dim()])
        } else {
            Ok(tape.value(y).clone())
        }
    }
}

fn classifier_forward_vars(tape: &mut Tape, [wf, bf, wo, bo]: [Var; 4], x: Var) -> Result<Var> {
    let rows = tape.shape(wf)[0];
    if tape.value(x).cols() != rows {
        return Err(Error::Shape {
            op: "classifier_forward",
            detail: format!("input {:?} against W_f with {rows} rows", tape.shape(x)),
        });
    }
    let h = tape.matmul(x, wf)?;
    let h = tape.add_row(h, bf)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, wo)?;
    tape.add_row(o, bo)
}

/// Classifier head stored under `prefix` applied to `x: [N, input]`.
pub fn classifier_forward(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let vars = [
        g.param(&format!("{prefix}.wf"))?,
        g.param(&format!("{prefix}.bf"))?,
        g.param(&format!("{prefix}.wo"))?,
        g.param(&format!("{prefix}.bo"))?,
    ];
    classifier_forward_vars(&mut g.tape, vars, x)
}

pub(crate) fn init_classifier_head(init: &mut Init, prefix: &str, input: usize, hidden: usize, out: usize) {
    init.normal(&format!("{prefix}.wf"), &[input, hidden], 1.0 / (input as f64).sqrt());
    init.constant(&format!("{prefix}.bf"), &[hidden], 0.0);
    init.normal(&format!("{prefix}.wo"), &[hidden, out], 1.0 / (hidden as f64).sqrt());
    init.constant(&format!("{prefix}.bo"), &[out], 0.0);
}

/// Maps real-valued scores to contrastive class ids: scores equal after
/// rounding to `decimals` places share a class. Ids follow ascending score.
pub fn score_classes(scores: &[f64], decimals: u32) -> Vec<usize> {
    let scale = 10f64.powi(decimals as i32);
    let keys: Vec<i64> = scores.iter().map(|s| (s * scale).round() as i64).collect();
    let mut ids = BTreeMap::new();
    for k in &keys {
        ids.entry(*k).or_insert(0usize);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    keys.iter().map(|k| ids[k]).collect()
}

/// Evaluates [`supcon_loss`] on plain vectors.
pub fn supcon_value(z: &[Tensor], labels: &[usize], cfg: &ContrastiveConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let zm = tape.constant(Tensor::stack_rows(z)?);
    let l = supcon_loss(&mut tape, zm, labels, cfg)?;
    Ok(tape.value(l).item())
}

/// Evaluates [`pairwise_sscl_loss`] on plain vectors.
pub fn pairwise_sscl_value(z: &[Tensor], z_prime: &[Tensor], cfg: &ContrastiveConfig) -> Result<f64> {
    if z.len() != z_prime.len() {
        return Err(Error::LengthMismatch {
            op: "pairwise_sscl_loss",
            left: z.len(),
            right: z_prime.len(),
        });
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::stack_rows(z)?);
    let b = tape.constant(Tensor::stack_rows(z_prime)?);
    let l = pairwise_sscl_loss(&mut tape, a, b, cfg)?;
    Ok(tape.value(l).item())
}
