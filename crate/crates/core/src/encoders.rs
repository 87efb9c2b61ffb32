//! Per-modality Transformer encoders and the projection heads that map a
//! pooled hidden representation into contrastive space.
//!
//! The encoder adds a fixed sinusoidal positional encoding to the raw
//! feature sequence, projects it linearly to `model_dim`, and runs a stack
//! of pre-norm self-attention layers closed by a final layer norm. The
//! pooled vector is the mean over sequence positions.

use crate::error::{Error, Result};
use crate::model::layers::{self, Init};
use crate::model::{groups, ModalityId, ModelConfig, MvclModel};
use crate::numerics::{Graph, Tensor, Var};

/// Encoder output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenRepresentation {
    /// `[L, model_dim]`
    pub sequence: Tensor,
    /// `[model_dim]`, the mean of `sequence` over positions.
    pub pooled: Tensor,
}

impl HiddenRepresentation {
    pub fn from_sequence(sequence: Tensor) -> Result<Self> {
        let (l, d) = sequence.dims2("hidden_representation")?;
        if l == 0 {
            return Err(Error::EmptyInput {
                op: "hidden_representation",
            });
        }
        let mut pooled = vec![0.0; d];
        for r in 0..l {
            pooled.iter_mut().zip(sequence.row(r)).for_each(|(p, v)| *p += v);
        }
        pooled.iter_mut().for_each(|p| *p /= l as f64);
        Ok(Self {
            sequence,
            pooled: Tensor::vector(pooled)?,
        })
    }
}

/// Output of a projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionVector {
    pub z: Tensor,
}

/// Graph handles for a batch of encoded samples.
#[derive(Debug, Clone, Copy)]
pub struct EncodedBatch {
    /// `[batch * L, model_dim]`, samples contiguous.
    pub sequence: Var,
    /// `[batch, model_dim]`
    pub pooled: Var,
    pub seq_len: usize,
}

/// Standard sinusoidal table `[len, dim]`: even columns `sin`, odd `cos`,
/// with wavelength `10000^(2i / dim)`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_parts(vec![len, dim], data)
}

pub(crate) fn init_encoder(init: &mut Init, cfg: &ModelConfig, m: ModalityId) {
    let p = groups::encoder(m);
    let d = cfg.model_dim;
    init.linear(&format!("{p}.in"), cfg.input(m).dim, d);
    for i in 0..cfg.num_layers {
        let l = format!("{p}.layer{i}");
        init.layer_norm(&format!("{l}.ln1"), d);
        init.attention(&format!("{l}.attn"), d);
        init.layer_norm(&format!("{l}.ln2"), d);
        init.mlp(&format!("{l}.ffn"), d, cfg.ffn_dim, d);
    }
    if cfg.num_layers > 0 {
        init.layer_norm(&format!("{p}.final_ln"), d);
    }
}

/// Encodes `batch` samples of modality `m` stacked as `[batch * L, d_m]`.
pub fn encode_batch(g: &mut Graph, cfg: &ModelConfig, m: ModalityId, x: Var, batch: usize) -> Result<EncodedBatch> {
    let shape = cfg.input(m);
    let expected = [batch * shape.seq_len, shape.dim];
    if g.tape.shape(x) != expected {
        return Err(Error::Config(format!(
            "modality {m} input has shape {:?}, expected {expected:?}",
            g.tape.shape(x)
        )));
    }
    let pe = positional_encoding(shape.seq_len, shape.dim);
    let tiled = Tensor::stack_rows(&vec![pe; batch])?;
    let pe = g.input(tiled);
    let xp = g.tape.add(x, pe)?;
    let p = groups::encoder(m);
    let mut h = layers::linear(g, &format!("{p}.in"), xp)?;
    for i in 0..cfg.num_layers {
        h = layers::pre_norm_layer(g, &format!("{p}.layer{i}"), h, batch, cfg.num_heads)?;
    }
    if cfg.num_layers > 0 {
        h = layers::layer_norm(g, &format!("{p}.final_ln"), h)?;
    }
    let pooled = g.tape.mean_pool(h, shape.seq_len)?;
    Ok(EncodedBatch {
        sequence: h,
        pooled,
        seq_len: shape.seq_len,
    })
}

/// Applies the two-layer projection head under `prefix` to `[batch, model_dim]`.
pub fn project_batch(g: &mut Graph, prefix: &str, pooled: Var) -> Result<Var> {
    layers::mlp(g, prefix, pooled)
}

impl MvclModel {
    /// Encodes one sample `x: [L_m, d_m]`.
    pub fn encode(&self, m: ModalityId, x: &Tensor) -> Result<HiddenRepresentation> {
        let mut g = Graph::frozen(&self.params);
        let xv = g.input(x.clone());
        let enc = encode_batch(&mut g, &self.config, m, xv, 1)?;
        let pooled = g.value(enc.pooled).reshape(&[self.config.model_dim])?;
        Ok(HiddenRepresentation {
            sequence: g.value(enc.sequence).clone(),
            pooled,
        })
    }

    /// Stage-1 projection of modality `m`; reads only `h.pooled`.
    pub fn project(&self, m: ModalityId, h: &HiddenRepresentation) -> Result<ProjectionVector> {
        let mut g = Graph::frozen(&self.params);
        let x = g.input(h.pooled.reshape(&[1, self.config.model_dim])?);
        let z = project_batch(&mut g, &groups::unimodal_projection(m), x)?;
        Ok(ProjectionVector {
            z: g.value(z).reshape(&[self.config.projection_dim])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModalityShape, TaskKind};
    use crate::numerics::{grad_check_store, SeededRng, Trainable};

    fn cfg(layers: usize) -> ModelConfig {
        let mut c = ModelConfig::desk(
            [
                ModalityShape { seq_len: 4, dim: 5 },
                ModalityShape { seq_len: 3, dim: 6 },
                ModalityShape { seq_len: 2, dim: 3 },
            ],
            TaskKind::Regression,
            2,
        );
        c.model_dim = 8;
        c.num_heads = 2;
        c.ffn_dim = 12;
        c.projection_dim = 6;
        c.classifier_hidden = 8;
        c.num_layers = layers;
        c
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::matrix(rows, cols, rng.normal_vec(rows * cols, 1.0)).unwrap()
    }

    #[test]
    fn output_shape_contract() {
        let model = MvclModel::new(cfg(2), 1).unwrap();
        let h = model.encode(ModalityId::Acoustic, &random(3, 6, 2)).unwrap();
        assert_eq!(h.sequence.shape(), &[3, 8]);
        assert_eq!(h.pooled.shape(), &[8]);
        let z = model.project(ModalityId::Acoustic, &h).unwrap();
        assert_eq!(z.z.shape(), &[6]);
    }

    #[test]
    fn pooled_is_sequence_mean() {
        let model = MvclModel::new(cfg(2), 1).unwrap();
        let h = model.encode(ModalityId::Text, &random(4, 5, 3)).unwrap();
        let again = HiddenRepresentation::from_sequence(h.sequence.clone()).unwrap();
        assert!(h.pooled.max_abs_diff(&again.pooled) < 1e-14);
    }

    #[test]
    fn encode_is_bitwise_deterministic() {
        let model = MvclModel::new(cfg(2), 1).unwrap();
        let x = random(4, 5, 9);
        let a = model.encode(ModalityId::Text, &x).unwrap();
        let b = model.encode(ModalityId::Text, &x).unwrap();
        assert_eq!(a.sequence.to_bits(), b.sequence.to_bits());
    }

    #[test]
    fn wrong_input_shape_is_config_error() {
        let model = MvclModel::new(cfg(1), 1).unwrap();
        assert!(matches!(
            model.encode(ModalityId::Text, &random(4, 6, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_depth_is_projected_positional_input() {
        let model = MvclModel::new(cfg(0), 4).unwrap();
        let x = random(4, 5, 11);
        let h = model.encode(ModalityId::Text, &x).unwrap();
        let pe = positional_encoding(4, 5);
        let w = model.params.get("enc.t.in.w").unwrap();
        let b = model.params.get("enc.t.in.b").unwrap();
        for r in 0..4 {
            for c in 0..8 {
                let mut acc = b.data()[c];
                for k in 0..5 {
                    acc += (x.get2(r, k) + pe.get2(r, k)) * w.get2(k, c);
                }
                assert!((h.sequence.get2(r, c) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_sensitive() {
        let model = MvclModel::new(cfg(2), 4).unwrap();
        let x = random(4, 5, 12);
        let mut rows: Vec<Tensor> = (0..4).map(|r| x.slice_rows(r, 1).unwrap()).collect();
        rows.swap(0, 3);
        let permuted = Tensor::stack_rows(&rows).unwrap();
        let a = model.encode(ModalityId::Text, &x).unwrap();
        let b = model.encode(ModalityId::Text, &permuted).unwrap();
        assert!(a.pooled.max_abs_diff(&b.pooled) > 1e-6);
    }

    #[test]
    fn projection_depends_only_on_pooled() {
        let model = MvclModel::new(cfg(2), 4).unwrap();
        let pooled = Tensor::vector(SeededRng::new(3).normal_vec(8, 1.0)).unwrap();
        let h1 = HiddenRepresentation {
            sequence: random(4, 8, 1),
            pooled: pooled.clone(),
        };
        let h2 = HiddenRepresentation {
            sequence: random(2, 8, 2),
            pooled,
        };
        let z1 = model.project(ModalityId::Vision, &h1).unwrap();
        let z2 = model.project(ModalityId::Vision, &h2).unwrap();
        assert_eq!(z1.z.to_bits(), z2.z.to_bits());
    }

    #[test]
    fn zero_projection_weights_give_zero() {
        let mut model = MvclModel::new(cfg(1), 4).unwrap();
        let names: Vec<String> = model.params.with_prefix("proj.t").map(|(n, _)| n.clone()).collect();
        for n in names {
            let shape = model.params.get(&n).unwrap().shape().to_vec();
            model.params.insert(n, Tensor::zeros(&shape));
        }
        let h = model.encode(ModalityId::Text, &random(4, 5, 1)).unwrap();
        let z = model.project(ModalityId::Text, &h).unwrap();
        assert!(z.z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_matches_explicit_mlp() {
        let model = MvclModel::new(cfg(1), 8).unwrap();
        let h = model.encode(ModalityId::Vision, &random(2, 3, 5)).unwrap();
        let z = model.project(ModalityId::Vision, &h).unwrap();
        let p = |n: &str| model.params.get(&format!("proj.v.{n}")).unwrap().clone();
        let (w1, b1, w2, b2) = (p("l1.w"), p("l1.b"), p("l2.w"), p("l2.b"));
        let mut hidden = vec![0.0; 8];
        for j in 0..8 {
            let mut acc = b1.data()[j];
            for i in 0..8 {
                acc += h.pooled.data()[i] * w1.get2(i, j);
            }
            hidden[j] = acc.max(0.0);
        }
        for k in 0..6 {
            let mut acc = b2.data()[k];
            for j in 0..8 {
                acc += hidden[j] * w2.get2(j, k);
            }
            assert!((z.z.data()[k] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_project_gradient() {
        let c = cfg(1);
        let model = MvclModel::new(c.clone(), 21).unwrap();
        let x = random(2 * 3, 6, 22);
        let w = SeededRng::new(23).normal_vec(2 * 6, 1.0);
        let report = grad_check_store(
            |g| {
                let xv = g.input(x.clone());
                let e = encode_batch(g, &c, ModalityId::Acoustic, xv, 2)?;
                let z = project_batch(g, "proj.a", e.pooled)?;
                g.tape.weighted_sum(z, w.clone())
            },
            &model.params,
            &Trainable::Prefixes(vec!["enc.a".into(), "proj.a".into()]),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }
}
