//! Central finite-difference gradient checking.

use super::{GateGrad, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of
    /// `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±epsilon` perturbation crossed a non-differentiable
    /// point (a gate threshold, ReLU kink, pooling tie or bilinear cell edge).
    pub skipped: usize,
    pub worst_index: Option<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn evaluate<F>(f: &F, point: &Tensor) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new().with_gate_grad(GateGrad::Exact);
    let x = tape.constant(point.clone());
    let out = f(&mut tape, x)?;
    let v = scalar_of(&tape, out)?;
    Ok((v, tape.signature()))
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Shape(format!(
            "grad_check function must return a scalar, got shape {:?}",
            t.shape()
        )));
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` at `point` with central differences.
///
/// Gates use their exact (zero) derivative here, and coordinates whose
/// perturbation changes any discrete branch taken by the function are
/// skipped and counted rather than compared.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut tape = Tape::new().with_gate_grad(GateGrad::Exact);
    let x = tape.leaf(point.clone());
    let out = f(&mut tape, x)?;
    scalar_of(&tape, out)?;
    let base_sig = tape.signature();
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(x, point.numel());

    let mut report = GradCheckReport::default();
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let (fp, sp) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let (fm, sm) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let central = (fp - fm) / (2.0 * epsilon);
        let a = analytic[i];
        let denom = a.abs().max(central.abs()).max(1e-8);
        let rel = (a - central).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_index.is_none() {
            if rel >= report.max_rel_error {
                report.worst_index = Some(i);
            }
            report.max_rel_error = report.max_rel_error.max(rel);
        }
    }
    Ok(report)
}
