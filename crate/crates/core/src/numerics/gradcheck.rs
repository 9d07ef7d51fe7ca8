use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Smallest magnitude used in the relative-error denominator. Gradients
/// below it are compared on an absolute scale of this size.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a perturbation moved a ReLU input across 0.
    pub masked: usize,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares [`Tape::param_grads`] against central differences for every
/// parameter coordinate.
///
/// `build` records the forward pass for a given parameter store and returns
/// the scalar loss node.
pub fn finite_diff_check<F>(params: &ParamStore, step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    finite_diff_check_where(params, step, |_| true, build)
}

/// [`finite_diff_check`] restricted to parameters whose name passes `select`.
pub fn finite_diff_check_where<S, F>(params: &ParamStore, step: f64, select: S, build: F) -> Result<GradCheckReport>
where
    S: Fn(&str) -> bool,
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        Ok((tape.value(loss).item(), tape.relu_pattern()))
    };

    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let analytic = tape.param_grads(loss, params)?;
    let base_pattern = tape.relu_pattern();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        masked: 0,
    };
    let mut probe = params.clone();
    for id in params.ids().filter(|&id| select(params.name(id))) {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let (up, up_pattern) = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let (down, down_pattern) = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            if up_pattern != base_pattern || down_pattern != base_pattern {
                report.masked += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic[id.0].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_owned(), i));
            }
        }
    }
    Ok(report)
}
