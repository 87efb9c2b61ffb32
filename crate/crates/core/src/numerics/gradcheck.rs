//! Central finite-difference verification of reverse-mode gradients.

use super::params::{Graph, ParamStore, Trainable};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Result for one checked tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `|a − n|` at the entry with the largest relative error.
    pub abs_err_at_max_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_eps(epsilon: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "grad_check epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            detail: format!("function must return a scalar, got {:?}", t.shape()),
        });
    }
    Ok(t.item())
}

/// Checks the gradient of `f` with respect to each tensor in `params`.
///
/// `f` receives a fresh tape and one leaf per parameter, and must return a
/// scalar. Every entry of every parameter is perturbed by `±epsilon`.
pub fn grad_check<F>(f: F, params: &[Tensor], epsilon: f64, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_perturbed(f, params, epsilon, tolerance, |_| {})
}

/// [`grad_check`] with a hook that may tamper with the analytic gradients
/// before comparison; used to prove that a wrong gradient is caught.
pub fn grad_check_perturbed<F, H>(
    f: F,
    params: &[Tensor],
    epsilon: f64,
    tolerance: f64,
    hook: H,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    H: FnOnce(&mut [Tensor]),
{
    check_eps(epsilon)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zero(*v)).collect();
    hook(&mut analytic);

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut work = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, a) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            name: format!("param{pi}"),
            entries: a.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            abs_err_at_max_rel: 0.0,
        };
        for e in 0..a.len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + epsilon;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - epsilon;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let an = a.data()[e];
            let rel = relative_error(an, numeric);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.abs_err_at_max_rel = (an - numeric).abs();
            }
            check.max_abs_err = check.max_abs_err.max((an - numeric).abs());
        }
        checks.push(check);
    }
    Ok(GradReport {
        params: checks,
        tolerance,
    })
}

/// Checks gradients of a model-level function with respect to every
/// parameter of `store` selected by `trainable`.
pub fn grad_check_store<F>(
    f: F,
    store: &ParamStore,
    trainable: &Trainable,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    grad_check_store_perturbed(f, store, trainable, epsilon, tolerance, |_| {})
}

pub fn grad_check_store_perturbed<F, H>(
    f: F,
    store: &ParamStore,
    trainable: &Trainable,
    epsilon: f64,
    tolerance: f64,
    hook: H,
) -> Result<GradReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
    H: FnOnce(&mut [Tensor]),
{
    check_eps(epsilon)?;
    let mut g = Graph::new(store, trainable.clone());
    let out = f(&mut g)?;
    scalar_of(&g.tape, out)?;
    let named = g.param_grads(out)?;
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let mut analytic: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
    hook(&mut analytic);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::frozen(s);
        let out = f(&mut g)?;
        scalar_of(&g.tape, out)
    };

    let mut work = store.clone();
    let mut checks = Vec::with_capacity(names.len());
    for (name, a) in names.iter().zip(&analytic) {
        let mut check = ParamCheck {
            name: name.clone(),
            entries: a.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            abs_err_at_max_rel: 0.0,
        };
        for e in 0..a.len() {
            let orig = work.get(name)?.data()[e];
            work.get_mut(name)?.data_mut()[e] = orig + epsilon;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[e] = orig - epsilon;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let an = a.data()[e];
            let rel = relative_error(an, numeric);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.abs_err_at_max_rel = (an - numeric).abs();
            }
            check.max_abs_err = check.max_abs_err.max((an - numeric).abs());
        }
        checks.push(check);
    }
    Ok(GradReport {
        params: checks,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-8, "{report:?}");
        assert!(report.passed());
    }

    #[test]
    fn tampered_gradient_fails() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let report = grad_check_perturbed(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
            1e-4,
            |g| g[0].data_mut()[0] += 0.01,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn epsilon_out_of_range() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(matches!(
            grad_check(|t, v| t.sum(v[0]), &[x], 0.1, 1e-4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_names_the_op() {
        let x = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let r = t.reshape(v[0], &[1, 2])?;
                let n = t.l2_normalize_rows(r)?;
                t.sum(n)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Degenerate { op: "l2_normalize_rows", .. }));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
