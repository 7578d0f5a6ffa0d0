//! Central finite-difference gradient checks.

use crate::{Tape, Tensor, Var};

/// Worst-case agreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Largest absolute difference.
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences with step `eps` on every input entry (or at most
/// `max_entries` evenly spread entries per input).
///
/// `floor` keeps the relative error meaningful near zero gradients.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    floor: f64,
    max_entries: usize,
) -> GradCheck
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let y = f(&tape, &vars);
        assert_eq!(y.shape().iter().product::<usize>(), 1, "gradcheck needs a scalar output");
        tape.grad(y, &vars, false)
            .iter()
            .map(|g| g.value().as_ref().clone())
            .collect()
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.var(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let step = (n / max_entries.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work);
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}
