//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Builds `f` on a fresh tape with `inputs` as tracked leaves and compares
/// its gradient against central differences. `coords`, when given, restricts
/// the check to `(input index, element index)` pairs.
pub fn check<F>(f: F, inputs: &[Tensor], eps: f64, coords: Option<&[(usize, usize)]>) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("finite-difference evaluation".into()))
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get_or_zeros(v, x.shape()))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, x)| (0..x.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_err = 0.0f64;
    for &(i, j) in coords {
        let x0 = inputs[i].data()[j];
        work[i].data_mut()[j] = x0 + eps;
        let fp = eval(&work)?;
        work[i].data_mut()[j] = x0 - eps;
        let fm = eval(&work)?;
        work[i].data_mut()[j] = x0;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i].data()[j];
        max_rel_err = max_rel_err.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(GradCheck {
        max_rel_err,
        checked: coords.len(),
    })
}

/// Single-input form: the max relative error of `f` at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check(|t, v| f(t, v[0]), std::slice::from_ref(x), eps, None).map(|c| c.max_rel_err)
}
