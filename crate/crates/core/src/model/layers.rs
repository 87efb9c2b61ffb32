//! Parameterized building blocks shared by the encoders, the cross-modal
//! module and the heads. Every function reads its weights from the graph's
//! parameter store under a dotted `prefix`.

use crate::error::Result;
use crate::numerics::{Graph, ParamStore, SeededRng, Tensor, Var};

fn name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// `x · W + b` with `W: [in, out]`, `b: [out]`.
pub fn linear(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&name(prefix, "w"))?;
    let b = g.param(&name(prefix, "b"))?;
    let xw = g.tape.matmul(x, w)?;
    g.tape.add_row(xw, b)
}

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(&name(prefix, "g"))?;
    let bias = g.param(&name(prefix, "b"))?;
    let n = g.tape.layer_norm(x)?;
    let s = g.tape.mul_row(n, gain)?;
    g.tape.add_row(s, bias)
}

/// Two linear maps with a ReLU in between.
pub fn mlp(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, &name(prefix, "l1"), x)?;
    let h = g.tape.relu(h)?;
    linear(g, &name(prefix, "l2"), h)
}

/// Multi-head attention with learned query/key/value/output maps. The key
/// map has no bias: softmax over keys ignores a shift shared by all of them.
pub fn multi_head_attention(
    g: &mut Graph,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    batch: usize,
    heads: usize,
) -> Result<Var> {
    let q = linear(g, &name(prefix, "wq"), q_in)?;
    let wk = g.param(&name(prefix, "wk.w"))?;
    let k = g.tape.matmul(kv_in, wk)?;
    let v = linear(g, &name(prefix, "wv"), kv_in)?;
    let a = g.tape.attention(q, k, v, batch, heads)?;
    linear(g, &name(prefix, "wo"), a)
}

/// Post-norm attention block: `y = LN(q + MHA(q, kv))`, `out = LN(y + FFN(y))`.
pub fn post_norm_block(
    g: &mut Graph,
    prefix: &str,
    q: Var,
    kv: Var,
    batch: usize,
    heads: usize,
) -> Result<Var> {
    let a = multi_head_attention(g, &name(prefix, "attn"), q, kv, batch, heads)?;
    let r = g.tape.add(q, a)?;
    let y = layer_norm(g, &name(prefix, "ln1"), r)?;
    let f = mlp(g, &name(prefix, "ffn"), y)?;
    let r = g.tape.add(y, f)?;
    layer_norm(g, &name(prefix, "ln2"), r)
}

/// Pre-norm self-attention layer: `y = x + MHA(LN(x))`, `out = y + FFN(LN(y))`.
pub fn pre_norm_layer(g: &mut Graph, prefix: &str, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let n = layer_norm(g, &name(prefix, "ln1"), x)?;
    let a = multi_head_attention(g, &name(prefix, "attn"), n, n, batch, heads)?;
    let y = g.tape.add(x, a)?;
    let n = layer_norm(g, &name(prefix, "ln2"), y)?;
    let f = mlp(g, &name(prefix, "ffn"), n)?;
    g.tape.add(y, f)
}

/// Deterministic per-parameter initialization: each tensor draws from its
/// own stream derived from the model seed and the parameter name, so adding
/// or re-creating one parameter never shifts another.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

fn stream_of(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let mut rng = SeededRng::new(self.seed).fork(stream_of(name));
        let n = shape.iter().product();
        let data = rng.normal_vec(n, std);
        self.store
            .insert(name, Tensor::new(shape.to_vec(), data).expect("finite init"));
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::filled(shape, value));
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.normal(&name(prefix, "w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        self.constant(&name(prefix, "b"), &[fan_out], 0.0);
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.constant(&name(prefix, "g"), &[dim], 1.0);
        self.constant(&name(prefix, "b"), &[dim], 0.0);
    }

    pub fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, output: usize) {
        self.linear(&name(prefix, "l1"), input, hidden);
        self.linear(&name(prefix, "l2"), hidden, output);
    }

    pub fn attention(&mut self, prefix: &str, dim: usize) {
        for w in ["wq", "wv", "wo"] {
            self.linear(&format!("{prefix}.{w}"), dim, dim);
        }
        self.normal(&format!("{prefix}.wk.w"), &[dim, dim], 1.0 / (dim as f64).sqrt());
    }

    pub fn block(&mut self, prefix: &str, dim: usize, ffn: usize) {
        self.attention(&name(prefix, "attn"), dim);
        self.layer_norm(&name(prefix, "ln1"), dim);
        self.mlp(&name(prefix, "ffn"), dim, ffn, dim);
        self.layer_norm(&name(prefix, "ln2"), dim);
    }
}
