//! Gradient checks over every loss and the two model compositions, on
//! seeded random inputs and small configurations.

use crate::crossmodal::{fuse_batch, pool_refined, refine_batch};
use crate::encoders::{encode_batch, project_batch};
use crate::error::Result;
use crate::losses::{ce_loss, mse_loss, pairwise_sscl_loss, sscl_total, supcon_loss, ContrastiveConfig};
use crate::model::{groups, ModalityId, ModalityShape, ModelConfig, MvclModel, TaskKind};
use crate::numerics::{
    grad_check_perturbed, grad_check_store_perturbed, GradReport, Graph, ParamStore, SeededRng, Tensor, Trainable,
};
use crate::{Tape, Var};

pub const CHECK_NAMES: [&str; 7] = [
    "supcon_loss",
    "pairwise_sscl_loss",
    "sscl_total",
    "ce_loss",
    "mse_loss",
    "encode_project",
    "refine_fuse",
];

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst result of one named check across all seeds.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
    /// Absolute error at the entry with the worst relative error.
    pub abs_err_at_worst: f64,
    /// Seed and parameter of the worst entry.
    pub worst_seed: u64,
    pub worst_param: String,
    pub passed: bool,
}

fn matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, rng.normal_vec(rows * cols, 1.0)).expect("finite draw")
}

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::desk(
        [
            ModalityShape { seq_len: 3, dim: 4 },
            ModalityShape { seq_len: 2, dim: 3 },
            ModalityShape { seq_len: 2, dim: 5 },
        ],
        TaskKind::Regression,
        0,
    );
    c.model_dim = 8;
    c.num_heads = 2;
    c.ffn_dim = 8;
    c.projection_dim = 4;
    c.classifier_hidden = 8;
    c.num_layers = 1;
    c
}

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type GraphFn = Box<dyn Fn(&mut Graph) -> Result<Var>>;

/// A seeded check: free tensors through a loss, or model parameters
/// through a composition.
enum Subject {
    Loss { inputs: Vec<Tensor>, f: LossFn },
    Model { params: ParamStore, trainable: Trainable, f: GraphFn },
}

fn subject(name: &str, seed: u64) -> Result<Subject> {
    let mut rng = SeededRng::new(seed);
    let cfg = ContrastiveConfig::default();
    let loss = |inputs: Vec<Tensor>, f: LossFn| Ok(Subject::Loss { inputs, f });
    match name {
        "supcon_loss" => loss(
            vec![matrix(&mut rng, 4, 5)],
            Box::new(move |t, v| supcon_loss(t, v[0], &[0, 1, 0, 1], &cfg)),
        ),
        "pairwise_sscl_loss" => loss(
            vec![matrix(&mut rng, 3, 4), matrix(&mut rng, 3, 4)],
            Box::new(move |t, v| pairwise_sscl_loss(t, v[0], v[1], &cfg)),
        ),
        "sscl_total" => loss(
            (0..6).map(|_| matrix(&mut rng, 3, 4)).collect(),
            Box::new(move |t, v| sscl_total(t, [(v[0], v[1]), (v[2], v[3]), (v[4], v[5])], &cfg)),
        ),
        "ce_loss" => loss(vec![matrix(&mut rng, 4, 3)], Box::new(|t, v| ce_loss(t, v[0], &[2, 0, 1, 2]))),
        "mse_loss" => loss(
            vec![matrix(&mut rng, 5, 1), matrix(&mut rng, 5, 1)],
            Box::new(|t, v| mse_loss(t, v[0], v[1])),
        ),
        "encode_project" => {
            let c = small_config();
            let model = MvclModel::new(c.clone(), seed)?;
            let m = ModalityId::ALL[seed as usize % 3];
            let s = c.input(m);
            let x = matrix(&mut rng, 2 * s.seq_len, s.dim);
            let w = rng.normal_vec(2 * c.projection_dim, 1.0);
            Ok(Subject::Model {
                params: model.params,
                trainable: Trainable::Prefixes(vec![groups::encoder(m), groups::unimodal_projection(m)]),
                f: Box::new(move |g| {
                    let xv = g.input(x.clone());
                    let e = encode_batch(g, &c, m, xv, 2)?;
                    let z = project_batch(g, &groups::unimodal_projection(m), e.pooled)?;
                    g.tape.weighted_sum(z, w.clone())
                }),
            })
        }
        "refine_fuse" => {
            let c = small_config();
            let model = MvclModel::new(c.clone(), seed)?;
            let hs = ModalityId::ALL.map(|m| matrix(&mut rng, 2 * c.input(m).seq_len, c.model_dim));
            let w = rng.normal_vec(2 * c.model_dim, 1.0);
            Ok(Subject::Model {
                params: model.params,
                trainable: Trainable::Prefixes(vec![groups::CROSSMODAL.into(), groups::FUSION.into()]),
                f: Box::new(move |g| {
                    let hidden = [0, 1, 2].map(|i| g.input(hs[i].clone()));
                    let refined = refine_batch(g, &c, hidden, 2)?;
                    let pooled = pool_refined(g, &c, refined)?;
                    let f = fuse_batch(g, &c, pooled, 2)?;
                    g.tape.weighted_sum(f, w.clone())
                }),
            })
        }
        other => Err(crate::Error::Config(format!("unknown gradient check {other}"))),
    }
}

fn run_one(name: &str, seed: u64, fault: bool) -> Result<GradReport> {
    // Adds a large error to the first analytic gradient entry.
    let hook = move |g: &mut [Tensor]| {
        if fault {
            if let Some(t) = g.first_mut() {
                t.data_mut()[0] += 1.0;
            }
        }
    };
    match subject(name, seed)? {
        Subject::Loss { inputs, f } => grad_check_perturbed(|t, v| f(t, v), &inputs, EPSILON, TOLERANCE, hook),
        Subject::Model { params, trainable, f } => {
            grad_check_store_perturbed(|g| f(g), &params, &trainable, EPSILON, TOLERANCE, hook)
        }
    }
}

/// Runs every check in [`CHECK_NAMES`] over `seeds`. A check named in
/// `fault` gets a deliberately wrong analytic gradient.
pub fn run_gradchecks(seeds: &[u64], fault: Option<&str>) -> Result<Vec<CheckRow>> {
    CHECK_NAMES
        .iter()
        .map(|&name| {
            let mut row = CheckRow {
                name,
                seeds: seeds.len(),
                max_rel_err: 0.0,
                abs_err_at_worst: 0.0,
                worst_seed: seeds.first().copied().unwrap_or(0),
                worst_param: String::new(),
                passed: true,
            };
            for &seed in seeds {
                let r = run_one(name, seed, fault == Some(name))?;
                for p in &r.params {
                    if p.max_rel_err > row.max_rel_err {
                        row.max_rel_err = p.max_rel_err;
                        row.abs_err_at_worst = p.abs_err_at_max_rel;
                        row.worst_seed = seed;
                        row.worst_param = p.name.clone();
                    }
                }
            }
            row.passed = row.max_rel_err < TOLERANCE;
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_pass_on_five_seeds() {
        let rows = run_gradchecks(&[0, 1, 2, 3, 4], None).unwrap();
        assert_eq!(rows.len(), CHECK_NAMES.len());
        for r in rows.iter().filter(|r| r.name.ends_with("loss") || r.name == "sscl_total") {
            assert!(r.passed, "{} {}", r.name, r.max_rel_err);
        }
        let encode = rows.iter().find(|r| r.name == "encode_project").unwrap();
        assert!(encode.passed, "{}", encode.max_rel_err);
        let refine = rows.iter().find(|r| r.name == "refine_fuse").unwrap();
        assert!(refine.abs_err_at_worst < 1e-9, "{refine:?}");
    }

    #[test]
    fn injected_fault_is_caught() {
        let rows = run_gradchecks(&[0], Some("ce_loss")).unwrap();
        for r in rows {
            if r.name == "ce_loss" {
                assert!(!r.passed);
            } else {
                assert!(r.max_rel_err < 1e-3, "{} {}", r.name, r.max_rel_err);
            }
        }
    }
}
