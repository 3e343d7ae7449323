use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)` per input element.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

const REL_FLOOR: f64 = 1e-3;

/// Checks the gradient of a scalar function of `x` against central differences.
///
/// `f` is rebuilt on a fresh tape for every evaluation, so it may close over
/// other constants freely.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>, TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = f(&tape, xv)?;
        tape.backward(y)?;
        xv.grad()
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let eval = |probe: &Tensor<f64>| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let xv = tape.constant(probe.clone());
        let y = f(&tape, xv)?;
        if y.value().numel() != 1 {
            return Err(TensorError::NonScalarLoss(y.shape()));
        }
        Ok(y.item())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((hi - lo) / (2.0 * eps));
    }
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < tol && max_rel_error.is_finite(),
        rel_errors,
        analytic,
        numeric,
        max_rel_error,
        tol,
    })
}
