//! Central finite-difference gradient checking.
//!
//! Only forward evaluations of the function under test are used to build
//! the numerical gradient, so the check stays independent of the backward
//! implementation it validates.

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Default perturbation for double-precision checks.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic and numerical gradients of the scalar `f` with respect to
/// every input. Inputs are taken by value (as raw data and shape) and rebuilt
/// as parameter leaves for each evaluation.
pub fn check<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], step: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves = inputs
        .iter()
        .map(|(d, s)| Tensor::param(d.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    f(&leaves)?.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        no_grad(|| {
            let perturbed = inputs
                .iter()
                .enumerate()
                .map(|(i, (d, s))| {
                    let mut d = d.clone();
                    if i == which {
                        d[idx] += delta;
                    }
                    Tensor::new(d, s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(f(&perturbed)?.item())
        })
    };

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (which, (data, _)) in inputs.iter().enumerate() {
        for idx in 0..data.len() {
            let numeric = (eval(which, idx, step)? - eval(which, idx, -step)?) / (2.0 * step);
            let a = analytic[which][idx];
            let denom = a.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err,
        checked,
    })
}
