//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Relative error per input tensor.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
}

/// `||a - n|| / max(||a||, ||n||)`. When both norms are below `1e-6` the
/// gradient is numerically zero and the absolute difference is returned.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum());
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-6 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Central differences of a scalar function for every entry of every input.
pub fn finite_difference<F>(inputs: &[Tensor], f: &F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work, f)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work, f)?;
            work[i].data_mut()[j] = orig;
            g.push((plus - minus) / (2.0 * h));
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Compares tape gradients of `f` against central finite differences
/// (`h = 1e-5`) for every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let numeric = finite_difference(inputs, &f, FD_STEP)?;
    let per_input: Vec<f64> = vars
        .iter()
        .zip(&numeric)
        .map(|(&v, n)| {
            let zeros = alloc::vec![0.0; n.len()];
            relative_error(tape.grad(v).unwrap_or(&zeros), n)
        })
        .collect();
    let max_rel_error = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradReport {
        per_input,
        max_rel_error,
    })
}
