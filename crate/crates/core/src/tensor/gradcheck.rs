//! Central finite-difference oracle for tape gradients.

use super::{BackwardFault, ParamStore, Precision, Result, Tape, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }
}

pub(crate) fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of `f` against `(f(θ+h) − f(θ−h)) / 2h` for every
/// entry of every trainable tensor in `params`.
///
/// `f` builds a scalar on the tape it is given. The tape passed in is always
/// 64-bit; `precision` is the mode of the surrounding computation and anything
/// other than [`Precision::F64`] is refused.
pub fn finite_diff_check<F, E>(
    params: &mut ParamStore,
    precision: Precision,
    h: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, E>,
    E: From<TensorError>,
{
    run_check(params, precision, h, tol, None, f)
}

/// [`finite_diff_check`] with a deliberately broken backward rule on the
/// analytic pass. Used to confirm the checker actually catches bad gradients.
pub fn finite_diff_check_with_fault<F, E>(
    params: &mut ParamStore,
    precision: Precision,
    h: f64,
    tol: f64,
    fault: BackwardFault,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, E>,
    E: From<TensorError>,
{
    run_check(params, precision, h, tol, Some(fault), f)
}

fn run_check<F, E>(
    params: &mut ParamStore,
    precision: Precision,
    h: f64,
    tol: f64,
    fault: Option<BackwardFault>,
    mut f: F,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, E>,
    E: From<TensorError>,
{
    if precision != Precision::F64 {
        return Err(TensorError::PrecisionRefused(precision).into());
    }
    let mut tape = Tape::new(Precision::F64);
    if let Some(fault) = fault {
        tape = tape.with_fault(fault);
    }
    let loss = f(params, &mut tape)?;
    let grads = tape.backward(loss)?;
    grads.assign(&tape, params);
    drop(tape);

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new(Precision::F64);
        let v = f(store, &mut tape)?;
        Ok(tape.scalar(v))
    };

    let names: Vec<String> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect();
    let mut report = GradCheckReport {
        tolerance: tol,
        params: Vec::new(),
        failures: Vec::new(),
    };
    for name in names {
        let analytic = params.get(&name)?.grad().unwrap().to_vec();
        let mut max_rel = 0.0_f64;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params.get(&name)?.data()[i];
            params.get_mut(&name)?.data_mut()[i] = orig + h;
            let plus = eval(params)?;
            params.get_mut(&name)?.data_mut()[i] = orig - h;
            let minus = eval(params)?;
            params.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = rel_error(a, numeric);
            max_rel = max_rel.max(rel);
            if rel > tol {
                report.failures.push(GradCheckFailure {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.params.push(ParamCheck {
            name,
            entries: analytic.len(),
            max_rel_error: max_rel,
        });
    }
    Ok(report)
}
