//! Central finite-difference verification of tape gradients.

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that gradients that are
/// zero up to rounding compare by absolute difference instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient of `loss_fn` against central finite
/// differences for every element of every `requires_grad` tensor in
/// `params`. Frozen tensors are skipped. Gradients already stored in
/// `params` are cleared.
pub fn grad_check<F>(params: &mut ParamStore<f64>, epsilon: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    params.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, params)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Verification("non-finite loss".into()));
        }
        tape.backward_into(loss, params)?;
    }

    let mut eval = |params: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, params)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Verification(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = params
        .iter()
        .filter(|(_, _, t)| t.requires_grad())
        .map(|(id, name, _)| (id, name.to_string()))
        .collect();
    for (id, name) in ids {
        let n = params.get(id).numel();
        let analytic: Vec<f64> = match params.get(id).grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; n],
        };
        for (i, &grad) in analytic.iter().enumerate() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + epsilon;
            let plus = eval(params);
            params.get_mut(id).data_mut()[i] = orig - epsilon;
            let minus = eval(params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let err = relative_error(grad, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = err;
                report.worst_param = Some(name.clone());
                report.worst_index = i;
                report.analytic = analytic[i];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
