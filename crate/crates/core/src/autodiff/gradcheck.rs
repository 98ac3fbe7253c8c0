use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `loss` builds a scalar on a fresh tape from the bound parameters. Every
/// entry of every learnable parameter is perturbed by `±h`; the error of an
/// entry is `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(params: &ParamSet, h: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let out = loss(&mut tape, &bound)?;
    let analytic = tape.backward(out)?;

    let mut eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape)?;
        let out = loss(&mut tape, &bound)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.learnable_names().map(str::to_string).collect();
    for name in names {
        let grad = &analytic[&name];
        let n = grad.len();
        for i in 0..n {
            let orig = params.get(&name).expect("bound").data()[i];
            probe.get_mut(&name).expect("present").data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
