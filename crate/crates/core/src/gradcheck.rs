//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values on fresh tapes, so
//! it is independent of the reverse-mode code it checks.

use crate::error::Result;
use crate::tensor::{DiffTensor, Tape, Var};

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor on the denominator of the relative error, so that gradients which
/// are zero up to rounding do not produce spurious failures.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Numerical gradient of `f` with respect to every element of every input.
pub fn numeric_gradient<F>(f: &F, inputs: &[DiffTensor], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[DiffTensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut work: Vec<DiffTensor> = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].numel()];
        for (j, slot) in g.iter_mut().enumerate() {
            let orig = inputs[k].values()[j];
            work[k].values_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[k].values_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[k].values_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        result.push(g);
    }
    Ok(result)
}

/// Compares reverse-mode gradients of the scalar `f` against central differences.
pub fn check_gradients<F>(f: F, inputs: &[DiffTensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let numeric = numeric_gradient(&f, inputs, step)?;

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
    };
    for (k, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for (j, (&a, &n)) in analytic.iter().zip(&numeric[k]).enumerate() {
            let rel = relative_error(a, n);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((k, j, a, n));
            }
        }
    }
    Ok(report)
}
