//! Central finite differences against reverse-mode gradients.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Model, ModelConfig};
use crate::params::Bound;
use crate::raster::Mask;
use crate::tensor::Tensor;
use crate::train::mtl_loss;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (parameter index, flat coordinate, analytic, numeric) of the worst
    /// coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Which coordinates of each parameter to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many coordinates per parameter, drawn without
    /// replacement from a seeded stream.
    Sampled {
        per_param: usize,
        seed: u64,
    },
}

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+e) - f(x-e)) / 2e`, error O(e²).
    Central,
    /// `(8(f(x+e) - f(x-e)) - (f(x+2e) - f(x-2e))) / 12e`, error O(e⁴).
    /// Tolerates a larger `e`, which keeps rounding noise in `f` from
    /// swamping coordinates whose gradient is tiny.
    FivePoint,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub eps: f64,
    pub coverage: Coverage,
    pub stencil: Stencil,
}

impl CheckOptions {
    pub fn central(eps: f64) -> Self {
        CheckOptions {
            eps,
            coverage: Coverage::All,
            stencil: Stencil::Central,
        }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of the scalar built by `f` with
/// `(f(x+eps) - f(x-eps)) / 2eps` on every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, params, CheckOptions::central(eps))
}

pub fn grad_check_with<F>(
    f: F,
    params: &[Tensor<f64>],
    opts: CheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.input(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        Ok(v)
    };

    let CheckOptions {
        eps,
        coverage,
        stencil,
    } = opts;
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let mut rng = match coverage {
        Coverage::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::All => None,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords: Vec<usize> = match (coverage, rng.as_mut()) {
            (Coverage::Sampled { per_param, .. }, Some(r)) if per_param < n => {
                let mut c = index::sample(r, n, per_param).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for ci in coords {
            let orig = params[pi].data()[ci];
            let mut diff = |h: f64| -> Result<f64> {
                work[pi].data_mut()[ci] = orig + h;
                let fp = eval(&work)?;
                work[pi].data_mut()[ci] = orig - h;
                let fm = eval(&work)?;
                work[pi].data_mut()[ci] = orig;
                Ok(fp - fm)
            };
            let numeric = match stencil {
                Stencil::Central => diff(eps)? / (2.0 * eps),
                Stencil::FivePoint => (8.0 * diff(eps)? - diff(2.0 * eps)?) / (12.0 * eps),
            };
            let a = analytic[pi].data()[ci];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((pi, ci, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Settings for checking the whole model plus loss.
#[derive(Debug, Clone, Copy)]
pub struct ModelCheck {
    pub size: usize,
    pub tasks: usize,
    /// Half-width of the uniform offset added to the initial weights.
    /// Freshly initialised biases sit on flat, tightly curved spots of the
    /// LayerNorms, so the check runs at a generic nearby point instead.
    pub jitter: f64,
    pub eps: f64,
    pub per_param: usize,
}

impl Default for ModelCheck {
    fn default() -> Self {
        ModelCheck {
            size: 32,
            tasks: 2,
            jitter: 0.1,
            eps: 1e-3,
            per_param: 16,
        }
    }
}

/// Gradient check of encoder, decoder and task loss in 64-bit on a random
/// image with random binary labels. Returns the report and the parameter
/// names (indexed by `worst.0`).
pub fn model_grad_check(seed: u64, check: ModelCheck) -> Result<(GradCheckReport, Vec<String>)> {
    let cfg = ModelConfig::desk(check.tasks);
    let (model, store) = Model::build::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let n = check.size;
    let image = Tensor::<f64>::uniform(&[n, n, 3], -2.0, 2.0, &mut rng);
    let labels: Vec<Mask> = (0..check.tasks)
        .map(|_| {
            let data = (0..n * n).map(|_| rng.random_bool(0.3) as u8).collect();
            Mask::from_raw(n, n, data)
        })
        .collect::<Result<_>>()?;
    let params: Vec<Tensor<f64>> = store
        .tensors()
        .iter()
        .map(|t| {
            let mut p = t.clone();
            for v in p.data_mut() {
                *v += rng.random_range(-check.jitter..=check.jitter);
            }
            p
        })
        .collect();
    let opts = CheckOptions {
        eps: check.eps,
        coverage: Coverage::Sampled {
            per_param: check.per_param,
            seed,
        },
        stencil: Stencil::FivePoint,
    };
    let report = grad_check_with(
        |g, v| {
            let p = Bound::from_vars(v.to_vec());
            let x = g.input(image.clone());
            let out = model.forward(g, &p, x)?;
            Ok(mtl_loss(g, &out.logits, &labels)?.0)
        },
        &params,
        opts,
    )?;
    Ok((report, store.names().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_f64(&[3, 2], &[0.1, -0.4, 2.0, 0.3, 0.0, 1.5]).unwrap();
        let r = grad_check(|g, v| g.sum(v[0]), &[x], 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.coords_checked, 6);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let x = Tensor::<f64>::from_f64(&[5], &[0.3, -1.2, 0.8, 2.0, -0.1]).unwrap();
        let mut g = Graph::new();
        let v = g.param(x);
        let s = g.softmax(v).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(v).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn sampled_coverage_limits_coordinates() {
        let x = Tensor::<f64>::ones(&[10, 10]);
        let r = grad_check_with(
            |g, v| g.sum(v[0]),
            &[x],
            CheckOptions {
                coverage: Coverage::Sampled {
                    per_param: 7,
                    seed: 3,
                },
                ..CheckOptions::central(1e-6)
            },
        )
        .unwrap();
        assert_eq!(r.coords_checked, 7);
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        // e⁴ error term vanishes for polynomials up to degree 4
        let x = Tensor::<f64>::from_f64(&[1], &[0.7]).unwrap();
        let quartic = |g: &mut Graph<f64>, v: &[Var]| {
            let x2 = g.mul(v[0], v[0])?;
            let x4 = g.mul(x2, x2)?;
            g.sum(x4)
        };
        let opts = CheckOptions {
            stencil: Stencil::FivePoint,
            ..CheckOptions::central(0.1)
        };
        let r = grad_check_with(quartic, std::slice::from_ref(&x), opts).unwrap();
        assert!(r.max_rel_err < 1e-12, "{r:?}");
        let r = grad_check(quartic, &[x], 0.1).unwrap();
        assert!(r.max_rel_err > 1e-3);
    }
}
