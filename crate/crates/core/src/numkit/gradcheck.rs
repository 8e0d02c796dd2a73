use crate::error::{Error, Result};

use super::dense::DenseMatrix;
use super::tape::{Tape, Var};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked entries of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-10)`.
    pub max_relative_error: f64,
    /// `(param index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Entries whose ±epsilon probe crossed a kink of a non-smooth primitive.
    pub skipped: usize,
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` builds a scalar loss from the registered parameter vars. An entry is
/// skipped when perturbing it by ±epsilon moves any ReLU, hinge, absolute
/// value or norm input across its kink, since the difference quotient is not
/// a derivative there.
pub fn check_gradient<F>(f: F, params: &[DenseMatrix<f64>], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_gradient_with(f, params, epsilon, |_| {})
}

/// Same as [`check_gradient`], but lets the caller tamper with the analytic
/// gradients before comparison. Used as a negative control.
pub fn check_gradient_with<F, H>(
    f: F,
    params: &[DenseMatrix<f64>],
    epsilon: f64,
    tamper: H,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    H: Fn(&mut Vec<DenseMatrix<f64>>),
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::InvalidInput(format!(
            "epsilon {epsilon:e} outside [1e-7, 1e-4]"
        )));
    }

    let evaluate = |values: &[DenseMatrix<f64>]| -> Result<(f64, Vec<i8>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("gradient-check objective".into()));
        }
        Ok((value, tape.kink_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| tape.param(v.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.scalar_value(loss).is_finite() {
        return Err(Error::NonFinite("gradient-check objective".into()));
    }
    let base_signature = tape.kink_signature();
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<DenseMatrix<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    tamper(&mut analytic);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe: Vec<DenseMatrix<f64>> = params.to_vec();
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let original = params[p].as_slice()[e];
            probe[p].as_mut_slice()[e] = original + epsilon;
            let (plus, sig_plus) = evaluate(&probe)?;
            probe[p].as_mut_slice()[e] = original - epsilon;
            let (minus, sig_minus) = evaluate(&probe)?;
            probe[p].as_mut_slice()[e] = original;

            if sig_plus != base_signature || sig_minus != base_signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[p].as_slice()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-10);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((p, e));
            }
        }
    }
    Ok(report)
}
