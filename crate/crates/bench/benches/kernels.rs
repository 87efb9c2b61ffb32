use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mvcl_bench::{desk_config, random_matrix};
use mvcl_core::encoders::{encode_batch, project_batch};
use mvcl_core::losses::{supcon_loss, ContrastiveConfig};
use mvcl_core::model::groups;
use mvcl_core::{Graph, ModalityId, MvclModel, SeededRng, Tape, Trainable};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [32usize, 64, 128] {
        let mut rng = SeededRng::new(1);
        let (a, b) = (random_matrix(&mut rng, n, n), random_matrix(&mut rng, n, n));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (va, vb) = (t.param(a.clone()), t.param(b.clone()));
                let p = t.matmul(va, vb).unwrap();
                let s = t.sum(p).unwrap();
                t.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let (batch, len, dim, heads) = (16, 20, 32, 4);
    let mut rng = SeededRng::new(2);
    let qkv: Vec<_> = (0..3).map(|_| random_matrix(&mut rng, batch * len, dim)).collect();
    c.bench_function("attention_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let v: Vec<_> = qkv.iter().map(|x| t.param(x.clone())).collect();
            let out = t.attention(v[0], v[1], v[2], batch, heads).unwrap();
            let s = t.sum(out).unwrap();
            t.backward(s).unwrap()
        })
    });
}

fn supcon(c: &mut Criterion) {
    let mut group = c.benchmark_group("supcon_fwd_bwd");
    let cfg = ContrastiveConfig::default();
    for n in [16usize, 64, 128] {
        let mut rng = SeededRng::new(3);
        let z = random_matrix(&mut rng, n, 32);
        let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let v = t.param(z.clone());
                let l = supcon_loss(&mut t, v, &labels, &cfg).unwrap();
                t.backward(l).unwrap()
            })
        });
    }
    group.finish();
}

fn encoder_step(c: &mut Criterion) {
    let cfg = desk_config();
    let model = MvclModel::new(cfg.clone(), 4).unwrap();
    let m = ModalityId::ALL[0];
    let batch = 16;
    let shape = cfg.input(m);
    let mut rng = SeededRng::new(4);
    let x = random_matrix(&mut rng, batch * shape.seq_len, shape.dim);
    let trainable = Trainable::Prefixes(vec![groups::encoder(m), groups::unimodal_projection(m)]);
    c.bench_function("encoder_step", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(&model.params, trainable.clone());
            let xv = g.input(x.clone());
            let e = encode_batch(&mut g, &cfg, m, xv, batch).unwrap();
            let z = project_batch(&mut g, &groups::unimodal_projection(m), e.pooled).unwrap();
            let s = g.tape.sum(z).unwrap();
            g.param_grads(s).unwrap()
        })
    });
}

criterion_group!(benches, matmul, attention, supcon, encoder_step);
criterion_main!(benches);
