use std::sync::Arc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::Execution;

pub const DEFAULT_STEP: f64 = 1e-5;

const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &[Arc<Tensor>]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.input_shared(Arc::clone(p))).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Evaluation(format!("objective must be scalar, got {:?}", v.shape())));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::Evaluation(format!("objective is not finite: {x}")));
    }
    Ok(x)
}

/// Compares the reverse-mode gradient of `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every parameter element.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync + Send,
{
    grad_check_with(f, params, h, Execution::default())
}

pub fn grad_check_with<F>(f: F, params: &[Tensor], h: f64, exec: Execution) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync + Send,
{
    let shared: Vec<Arc<Tensor>> = params.iter().cloned().map(Arc::new).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = shared.iter().map(|p| tape.input_shared(Arc::clone(p))).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(Error::Evaluation(format!("objective is not finite: {base}")));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
    drop(tape);

    let probes: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(pi, p)| (0..p.len()).map(move |e| (pi, e))).collect();

    let numeric = exec.map(&probes, |&(pi, e)| -> Result<f64> {
        let mut local = shared.clone();
        let orig = params[pi].data()[e];
        Arc::make_mut(&mut local[pi]).data_mut()[e] = orig + h;
        let plus = evaluate(&f, &local)?;
        Arc::make_mut(&mut local[pi]).data_mut()[e] = orig - h;
        let minus = evaluate(&f, &local)?;
        Ok((plus - minus) / (2.0 * h))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: probes.len(),
    };
    for (&(pi, e), num) in probes.iter().zip(numeric) {
        let num = num?;
        let ana = analytic[pi].data()[e];
        let err = relative_error(ana, num);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (pi, e);
            report.analytic_at_worst = ana;
            report.numeric_at_worst = num;
        }
    }
    Ok(report)
}
