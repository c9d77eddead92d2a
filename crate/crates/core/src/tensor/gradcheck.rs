//! Central finite differences against the tape's analytic gradients.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input, element) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Denominator floor; below it the error is effectively absolute.
const REL_FLOOR: f64 = 1e-2;

pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floored(a, b, REL_FLOOR)
}

fn rel_err_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Reduces `y` to the scalar `sum(y * r)` for a constant `r`.
pub fn project<T: Scalar>(tape: &mut Tape<T>, y: Var, r: &Tensor<T>) -> Result<Var> {
    let v = tape.value(y);
    if v.shape() != r.shape() {
        return Err(Error::Shape(format!("projection {:?} vs {:?}", r.shape(), v.shape())));
    }
    let s = v.data().iter().zip(r.data()).map(|(&a, &b)| a * b).sum();
    tape.fused(s, &[y], vec![r.clone()])
}

/// Checks every element of every input. `f` builds a scalar from the inputs
/// on a fresh tape.
pub fn grad_check<T: Scalar>(
    f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<T>],
    h: f64,
) -> Result<GradReport> {
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    grad_check_elements(f, inputs, h, &all)
}

/// Like [`grad_check`] but only perturbs `elements[k]` of input `k`.
pub fn grad_check_elements<T: Scalar>(
    f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<T>],
    h: f64,
    elements: &[Vec<usize>],
) -> Result<GradReport> {
    if elements.len() != inputs.len() {
        return Err(Error::Shape(format!("{} element lists for {} inputs", elements.len(), inputs.len())));
    }
    let eval = |vals: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::forward_only();
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0].f64())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    // differences of f resolve derivatives only down to ~eps*|f|/h, so the
    // floor grows with the function value
    let floor = REL_FLOOR * tape.value(out).data()[0].f64().abs().max(1.0);
    let mut report = GradReport { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for &i in &elements[k] {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = T::of(orig.f64() + h);
            let up = eval(&work)?;
            work[k].data_mut()[i] = T::of(orig.f64() - h);
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err_floored(analytic.data()[i].f64(), numeric, floor);
            // a NaN sticks so the report fails
            if !report.max_rel_err.is_nan() && (report.checked == 0 || e.is_nan() || e > report.max_rel_err) {
                report.max_rel_err = e;
                report.worst = (k, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
