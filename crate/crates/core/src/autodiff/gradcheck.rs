//! Central finite-difference checking for tape-built functions.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check over every input element.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub max_rel_err: f64,
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compares `backward` against central differences with step `h`.
///
/// `f` must build a scalar loss on the given tape from the supplied leaf
/// variables, using only forward operations.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_err: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let mut col = Vec::with_capacity(x.len());
        for (j, &a) in analytic[i].iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let g = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            max_rel_err = max_rel_err.max(rel_err(g, a));
            col.push(g);
        }
        numeric.push(col);
    }
    Ok(GradCheck { analytic, numeric, max_rel_err })
}
