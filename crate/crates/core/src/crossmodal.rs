//! Two-level cross-modal Transformer and self-attention fusion.
//!
//! A refined representation is named by three modality letters `xyz`. Level
//! one attends from `H_y` (queries) to `H_z` (keys and values), giving the
//! `y`-aware `z` representation `f_yz`. Level two attends from `H_x` to
//! `f_yz`. The result `f_xyz` is aimed at the target modality `z` and, as with
//! any attention, has the sequence length of its outermost query `x`.
//!
//! The six members pair up by target: `(avt, vat)` for text, `(tva, vta)`
//! for acoustic and `(tav, atv)` for vision. Fusion maps each pooled member
//! through one shared linear layer, adds a learned slot embedding, runs one
//! self-attention block over the six tokens and mean-pools them.

use crate::encoders::HiddenRepresentation;
use crate::error::{Error, Result};
use crate::model::layers::{self, Init};
use crate::model::{groups, ModalityId, ModelConfig, MvclModel};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// One of the six refinement orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RefinedSlot {
    Avt,
    Vat,
    Tva,
    Vta,
    Tav,
    Atv,
}

impl RefinedSlot {
    pub const ALL: [RefinedSlot; 6] = [
        RefinedSlot::Avt,
        RefinedSlot::Vat,
        RefinedSlot::Tva,
        RefinedSlot::Vta,
        RefinedSlot::Tav,
        RefinedSlot::Atv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RefinedSlot::Avt => "avt",
            RefinedSlot::Vat => "vat",
            RefinedSlot::Tva => "tva",
            RefinedSlot::Vta => "vta",
            RefinedSlot::Tav => "tav",
            RefinedSlot::Atv => "atv",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap()
    }

    fn letters(self) -> [ModalityId; 3] {
        let mut it = self.name().chars().map(|c| ModalityId::from_letter(c).unwrap());
        [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
    }

    /// Query modality of the second level; fixes the output length.
    pub fn outer_query(self) -> ModalityId {
        self.letters()[0]
    }

    /// Query modality of the first level.
    pub fn inner_query(self) -> ModalityId {
        self.letters()[1]
    }

    /// Modality refined by this pathway (keys and values of level one).
    pub fn target(self) -> ModalityId {
        self.letters()[2]
    }

    /// The two views aimed at `m`.
    pub fn pair_for(m: ModalityId) -> (RefinedSlot, RefinedSlot) {
        match m {
            ModalityId::Text => (RefinedSlot::Avt, RefinedSlot::Vat),
            ModalityId::Acoustic => (RefinedSlot::Tva, RefinedSlot::Vta),
            ModalityId::Vision => (RefinedSlot::Tav, RefinedSlot::Atv),
        }
    }

    pub fn block_prefix(self, level: usize, block: usize) -> String {
        format!("{}.{}.level{level}.block{block}", groups::CROSSMODAL, self.name())
    }
}

/// The six refined representations of one sample, indexed by [`RefinedSlot`].
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedSet {
    members: [HiddenRepresentation; 6],
}

impl RefinedSet {
    pub fn new(members: [HiddenRepresentation; 6]) -> Self {
        Self { members }
    }

    pub fn get(&self, slot: RefinedSlot) -> &HiddenRepresentation {
        &self.members[slot.index()]
    }

    pub fn members(&self) -> &[HiddenRepresentation; 6] {
        &self.members
    }
}

/// Fused multimodal vector `[model_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation {
    pub f: Tensor,
}

pub(crate) fn init_pathway(init: &mut Init, cfg: &ModelConfig, slot: RefinedSlot) {
    for level in 1..=2 {
        for b in 0..cfg.cross_blocks {
            init.block(&slot.block_prefix(level, b), cfg.model_dim, cfg.ffn_dim);
        }
    }
}

pub(crate) fn init_fusion(init: &mut Init, cfg: &ModelConfig) {
    let d = cfg.model_dim;
    init.linear(&format!("{}.lin", groups::FUSION), d, d);
    if cfg.type_embeddings {
        init.normal(&format!("{}.type_emb", groups::FUSION), &[6, d], 0.5);
    }
    init.block(&format!("{}.sa", groups::FUSION), d, cfg.ffn_dim);
}

/// One post-norm cross-attention block: queries from `q`, keys and values
/// from `kv`. Both are `[batch * len, model_dim]` with samples contiguous.
pub fn cross_attend_batch(g: &mut Graph, prefix: &str, q: Var, kv: Var, batch: usize, heads: usize) -> Result<Var> {
    let (dq, dk) = (g.tape.shape(q), g.tape.shape(kv));
    if dq.len() != 2 || dk.len() != 2 || dq[1] != dk[1] {
        return Err(Error::Config(format!(
            "cross_attend needs equal model_dim columns, got {dq:?} and {dk:?}"
        )));
    }
    layers::post_norm_block(g, prefix, q, kv, batch, heads)
}

/// Refined sequences `[batch * L_outer, model_dim]` for all six slots, given
/// encoder sequences in `t, a, v` order.
pub fn refine_batch(g: &mut Graph, cfg: &ModelConfig, hidden: [Var; 3], batch: usize) -> Result<[Var; 6]> {
    for h in hidden {
        let s = g.tape.shape(h);
        if s.len() != 2 || s[1] != cfg.model_dim {
            return Err(Error::Config(format!(
                "hidden sequence {s:?} does not have model_dim {} columns",
                cfg.model_dim
            )));
        }
    }
    let mut out = Vec::with_capacity(6);
    for slot in RefinedSlot::ALL {
        let h = |m: ModalityId| hidden[m.index()];
        // Stacked blocks re-query with their own output; keys stay fixed.
        let base = h(slot.target());
        let mut f = h(slot.inner_query());
        for b in 0..cfg.cross_blocks {
            f = cross_attend_batch(g, &slot.block_prefix(1, b), f, base, batch, cfg.num_heads)?;
        }
        let mut q = h(slot.outer_query());
        for b in 0..cfg.cross_blocks {
            q = cross_attend_batch(g, &slot.block_prefix(2, b), q, f, batch, cfg.num_heads)?;
        }
        out.push(q);
    }
    Ok(out.try_into().unwrap())
}

/// Mean-pools each refined sequence to `[batch, model_dim]`.
pub fn pool_refined(g: &mut Graph, cfg: &ModelConfig, refined: [Var; 6]) -> Result<[Var; 6]> {
    let mut out = Vec::with_capacity(6);
    for (slot, r) in RefinedSlot::ALL.iter().zip(refined) {
        out.push(g.tape.mean_pool(r, cfg.input(slot.outer_query()).seq_len)?);
    }
    Ok(out.try_into().unwrap())
}

/// Fuses six pooled refined representations `[batch, model_dim]` into
/// `[batch, model_dim]`.
pub fn fuse_batch(g: &mut Graph, cfg: &ModelConfig, pooled: [Var; 6], batch: usize) -> Result<Var> {
    let lin = format!("{}.lin", groups::FUSION);
    let mut tokens = Vec::with_capacity(6);
    for (s, p) in pooled.into_iter().enumerate() {
        let mut t = layers::linear(g, &lin, p)?;
        if cfg.type_embeddings {
            let emb = g.param(&format!("{}.type_emb", groups::FUSION))?;
            let row = g.tape.slice_rows(emb, s, 1)?;
            t = g.tape.add_row(t, row)?;
        }
        tokens.push(t);
    }
    // Slot-major [6 * batch, d] to sample-major [batch * 6, d].
    let stacked = g.tape.concat_rows(&tokens)?;
    let order = (0..batch).flat_map(|b| (0..6).map(move |s| s * batch + b)).collect();
    let seq = g.tape.gather_rows(stacked, order)?;
    let sa = format!("{}.sa", groups::FUSION);
    let out = layers::post_norm_block(g, &sa, seq, seq, batch, cfg.num_heads)?;
    g.tape.mean_pool(out, 6)
}

/// Applies a single cross-attention block stored under `prefix`.
pub fn cross_attend(params: &ParamStore, prefix: &str, heads: usize, q_seq: &Tensor, kv_seq: &Tensor) -> Result<Tensor> {
    let mut g = Graph::frozen(params);
    let q = g.input(q_seq.clone());
    let kv = g.input(kv_seq.clone());
    let out = cross_attend_batch(&mut g, prefix, q, kv, 1, heads)?;
    Ok(g.value(out).clone())
}

impl MvclModel {
    pub fn refine(
        &self,
        h_t: &HiddenRepresentation,
        h_a: &HiddenRepresentation,
        h_v: &HiddenRepresentation,
    ) -> Result<RefinedSet> {
        let mut g = Graph::frozen(&self.params);
        let hidden = [h_t, h_a, h_v].map(|h| g.input(h.sequence.clone()));
        let refined = refine_batch(&mut g, &self.config, hidden, 1)?;
        let members: Vec<HiddenRepresentation> = refined
            .iter()
            .map(|r| HiddenRepresentation::from_sequence(g.value(*r).clone()))
            .collect::<Result<_>>()?;
        Ok(RefinedSet::new(members.try_into().unwrap()))
    }

    pub fn fuse(&self, r: &RefinedSet) -> Result<FusedRepresentation> {
        let mut g = Graph::frozen(&self.params);
        let d = self.config.model_dim;
        let mut pooled = Vec::with_capacity(6);
        for m in r.members() {
            pooled.push(g.input(m.pooled.reshape(&[1, d])?));
        }
        let f = fuse_batch(&mut g, &self.config, pooled.try_into().unwrap(), 1)?;
        Ok(FusedRepresentation {
            f: g.value(f).reshape(&[d])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModalityShape, TaskKind};
    use crate::numerics::{grad_check_store, SeededRng, Trainable};

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::desk(
            [
                ModalityShape { seq_len: 4, dim: 3 },
                ModalityShape { seq_len: 3, dim: 3 },
                ModalityShape { seq_len: 2, dim: 3 },
            ],
            TaskKind::Regression,
            2,
        );
        c.model_dim = 8;
        c.num_heads = 2;
        c.ffn_dim = 8;
        c.projection_dim = 4;
        c.classifier_hidden = 8;
        c.num_layers = 1;
        c
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::matrix(rows, cols, SeededRng::new(seed).normal_vec(rows * cols, 1.0)).unwrap()
    }

    fn hidden(rows: usize, seed: u64) -> HiddenRepresentation {
        HiddenRepresentation::from_sequence(random(rows, 8, seed)).unwrap()
    }

    #[test]
    fn slot_letters() {
        assert_eq!(RefinedSlot::Avt.outer_query(), ModalityId::Acoustic);
        assert_eq!(RefinedSlot::Avt.inner_query(), ModalityId::Vision);
        assert_eq!(RefinedSlot::Avt.target(), ModalityId::Text);
        for m in ModalityId::ALL {
            let (x, y) = RefinedSlot::pair_for(m);
            assert_eq!(x.target(), m);
            assert_eq!(y.target(), m);
            assert_ne!(x, y);
        }
    }

    #[test]
    fn query_side_length_rule() {
        let model = MvclModel::new(cfg(), 2).unwrap();
        let r = model.refine(&hidden(4, 1), &hidden(3, 2), &hidden(2, 3)).unwrap();
        for slot in RefinedSlot::ALL {
            let expected = cfg().input(slot.outer_query()).seq_len;
            assert_eq!(r.get(slot).sequence.shape(), &[expected, 8], "{}", slot.name());
            assert_eq!(r.get(slot).pooled.shape(), &[8]);
        }
        assert_eq!(r.get(RefinedSlot::Avt).sequence.rows(), 3);
        assert_eq!(r.get(RefinedSlot::Vat).sequence.rows(), 2);
    }

    #[test]
    fn refine_is_deterministic() {
        let model = MvclModel::new(cfg(), 2).unwrap();
        let (t, a, v) = (hidden(4, 1), hidden(3, 2), hidden(2, 3));
        let r1 = model.refine(&t, &a, &v).unwrap();
        let r2 = model.refine(&t, &a, &v).unwrap();
        for slot in RefinedSlot::ALL {
            assert_eq!(r1.get(slot).sequence.to_bits(), r2.get(slot).sequence.to_bits());
        }
    }

    #[test]
    fn cross_attend_shape_and_mismatch() {
        let model = MvclModel::new(cfg(), 2).unwrap();
        let p = RefinedSlot::Avt.block_prefix(1, 0);
        let out = cross_attend(&model.params, &p, 2, &random(5, 8, 1), &random(3, 8, 2)).unwrap();
        assert_eq!(out.shape(), &[5, 8]);
        assert!(matches!(
            cross_attend(&model.params, &p, 2, &random(5, 8, 1), &random(3, 6, 2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_keys_give_query_independent_attention() {
        let model = MvclModel::new(cfg(), 2).unwrap();
        let p = RefinedSlot::Avt.block_prefix(1, 0);
        let row = random(1, 8, 4);
        let kv = Tensor::stack_rows(&vec![row; 3]).unwrap();
        let mut g = Graph::frozen(&model.params);
        let q1 = g.input(random(2, 8, 5));
        let q2 = g.input(random(2, 8, 6));
        let kvv = g.input(kv);
        let a1 = layers::multi_head_attention(&mut g, &format!("{p}.attn"), q1, kvv, 1, 2).unwrap();
        let a2 = layers::multi_head_attention(&mut g, &format!("{p}.attn"), q2, kvv, 1, 2).unwrap();
        let (v1, v2) = (g.value(a1).clone(), g.value(a2).clone());
        for r in 0..2 {
            for c in 0..8 {
                assert!((v1.get2(r, c) - v1.get2(0, c)).abs() < 1e-12);
                assert!((v1.get2(r, c) - v2.get2(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_shape() {
        let model = MvclModel::new(cfg(), 2).unwrap();
        let r = model.refine(&hidden(4, 1), &hidden(3, 2), &hidden(2, 3)).unwrap();
        let f = model.fuse(&r).unwrap();
        assert_eq!(f.f.shape(), &[8]);
    }

    fn permuted(r: &RefinedSet, perm: [usize; 6]) -> RefinedSet {
        let m = r.members();
        RefinedSet::new(perm.map(|i| m[i].clone()))
    }

    #[test]
    fn fuse_permutation_invariant_iff_type_embeddings_zero() {
        let mut model = MvclModel::new(cfg(), 2).unwrap();
        let r = model.refine(&hidden(4, 1), &hidden(3, 2), &hidden(2, 3)).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let p = permuted(&r, perm);
        let a = model.fuse(&r).unwrap();
        let b = model.fuse(&p).unwrap();
        assert!(a.f.max_abs_diff(&b.f) > 1e-6);
        model.params.insert("fusion.type_emb", Tensor::zeros(&[6, 8]));
        let a = model.fuse(&r).unwrap();
        let b = model.fuse(&p).unwrap();
        assert!(a.f.max_abs_diff(&b.f) < 1e-12);
    }

    /// Plain nested-`Vec` reimplementation used as the oracle below.
    mod naive {
        use crate::numerics::{ParamStore, Tensor};

        pub type M = Vec<Vec<f64>>;

        pub fn of(t: &Tensor) -> M {
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
        }

        fn p(store: &ParamStore, name: &str) -> Tensor {
            store.get(name).unwrap().clone()
        }

        fn matmul(a: &M, b: &M) -> M {
            a.iter()
                .map(|row| {
                    (0..b[0].len())
                        .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                        .collect()
                })
                .collect()
        }

        pub fn linear(store: &ParamStore, prefix: &str, x: &M, bias: bool) -> M {
            let w = of(&p(store, &format!("{prefix}.w")));
            let mut y = matmul(x, &w);
            if bias {
                let b = p(store, &format!("{prefix}.b"));
                for row in &mut y {
                    row.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
                }
            }
            y
        }

        fn layer_norm(store: &ParamStore, prefix: &str, x: &M) -> M {
            let g = p(store, &format!("{prefix}.g"));
            let b = p(store, &format!("{prefix}.b"));
            x.iter()
                .map(|row| {
                    let n = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j])
                        .collect()
                })
                .collect()
        }

        fn add(a: &M, b: &M) -> M {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
                .collect()
        }

        /// `softmax(Q_h K_hᵀ / √d_head) V_h` per head, heads concatenated.
        pub fn attention(store: &ParamStore, prefix: &str, q_in: &M, kv_in: &M, heads: usize) -> M {
            let q = linear(store, &format!("{prefix}.wq"), q_in, true);
            let k = linear(store, &format!("{prefix}.wk"), kv_in, false);
            let v = linear(store, &format!("{prefix}.wv"), kv_in, true);
            let d = q[0].len();
            let dh = d / heads;
            let mut out = vec![vec![0.0; d]; q.len()];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for (i, qi) in q.iter().enumerate() {
                    let scores: Vec<f64> = k
                        .iter()
                        .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in cols.clone() {
                        out[i][c] = e.iter().zip(&v).map(|(w, vj)| w / z * vj[c]).sum();
                    }
                }
            }
            linear(store, &format!("{prefix}.wo"), &out, true)
        }

        pub fn block(store: &ParamStore, prefix: &str, q: &M, kv: &M, heads: usize) -> M {
            let a = attention(store, &format!("{prefix}.attn"), q, kv, heads);
            let y = layer_norm(store, &format!("{prefix}.ln1"), &add(q, &a));
            let h = linear(store, &format!("{prefix}.ffn.l1"), &y, true);
            let h: M = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
            let f = linear(store, &format!("{prefix}.ffn.l2"), &h, true);
            layer_norm(store, &format!("{prefix}.ln2"), &add(&y, &f))
        }

        pub fn mean(x: &M) -> Vec<f64> {
            let n = x.len() as f64;
            (0..x[0].len()).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect()
        }

        pub fn max_diff(a: &M, t: &Tensor) -> f64 {
            a.iter()
                .flatten()
                .zip(t.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        }
    }

    #[test]
    fn cross_attend_matches_formula_oracle() {
        let model = MvclModel::new(cfg(), 7).unwrap();
        let p = RefinedSlot::Tva.block_prefix(2, 0);
        for seed in 0..5 {
            let (q, kv) = (random(4, 8, 10 + seed), random(3, 8, 20 + seed));
            let got = cross_attend(&model.params, &p, 2, &q, &kv).unwrap();
            let want = naive::block(&model.params, &p, &naive::of(&q), &naive::of(&kv), 2);
            assert!(naive::max_diff(&want, &got) < 1e-10);
        }
    }

    #[test]
    fn refine_matches_chained_oracle() {
        let model = MvclModel::new(cfg(), 8).unwrap();
        let hs = [hidden(4, 1), hidden(3, 2), hidden(2, 3)];
        let r = model.refine(&hs[0], &hs[1], &hs[2]).unwrap();
        for slot in RefinedSlot::ALL {
            let h = |m: ModalityId| naive::of(&hs[m.index()].sequence);
            let inner = naive::block(
                &model.params,
                &slot.block_prefix(1, 0),
                &h(slot.inner_query()),
                &h(slot.target()),
                2,
            );
            let outer = naive::block(&model.params, &slot.block_prefix(2, 0), &h(slot.outer_query()), &inner, 2);
            let member = r.get(slot);
            assert!(naive::max_diff(&outer, &member.sequence) < 1e-10, "{}", slot.name());
            let pooled = vec![naive::mean(&outer)];
            assert!(naive::max_diff(&pooled, &member.pooled) < 1e-10);
        }
    }

    #[test]
    fn fuse_matches_formula_oracle() {
        let model = MvclModel::new(cfg(), 9).unwrap();
        let r = RefinedSet::new([0, 1, 2, 3, 4, 5].map(|i| hidden(2 + i % 3, 40 + i as u64)));
        let got = model.fuse(&r).unwrap();
        let emb = model.params.get("fusion.type_emb").unwrap();
        let tokens: naive::M = r
            .members()
            .iter()
            .enumerate()
            .map(|(s, m)| {
                let t = naive::linear(&model.params, "fusion.lin", &naive::of(&m.pooled.reshape(&[1, 8]).unwrap()), true);
                t[0].iter().zip(emb.row(s)).map(|(a, b)| a + b).collect()
            })
            .collect();
        let out = naive::block(&model.params, "fusion.sa", &tokens, &tokens, 2);
        let want = vec![naive::mean(&out)];
        assert!(naive::max_diff(&want, &got.f) < 1e-10);
    }

    #[test]
    fn refine_fuse_gradient() {
        let c = cfg();
        let model = MvclModel::new(c.clone(), 3).unwrap();
        let hs = [random(2 * 4, 8, 1), random(2 * 3, 8, 2), random(2 * 2, 8, 3)];
        let w = SeededRng::new(9).normal_vec(2 * 8, 1.0);
        let report = grad_check_store(
            |g| {
                let hidden = [0, 1, 2].map(|i| g.input(hs[i].clone()));
                let refined = refine_batch(g, &c, hidden, 2)?;
                let pooled = pool_refined(g, &c, refined)?;
                let f = fuse_batch(g, &c, pooled, 2)?;
                g.tape.weighted_sum(f, w.clone())
            },
            &model.params,
            &Trainable::Prefixes(vec!["cross".into(), "fusion".into()]),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }
}
