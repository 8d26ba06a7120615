//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{ParamStore, Tensor};

/// Denominator floor of the relative error: gradients smaller than one are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new().with_finite_checks();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_output(&tape, out)
}

fn scalar_output(tape: &Tape<f64>, out: Var) -> Result<f64> {
    if tape.value(out).len() != 1 {
        return Err(Error::dim("gradient_check", "checked function must return a scalar"));
    }
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::Numeric {
            op: "gradient_check",
            detail: "non-finite objective".into(),
        });
    }
    Ok(v)
}

/// Checks `f`'s gradient with respect to every coordinate of every input.
pub fn check_inputs<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new().with_finite_checks();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_output(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = x0;
            report.record(analytic[j], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks the gradient of a parameterized loss at selected `(parameter, index)` coordinates.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    loss: F,
    coords: &[(String, usize)],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new().with_finite_checks();
        let out = loss(&mut tape, store)?;
        scalar_output(&tape, out)
    };
    let mut tape = Tape::new().with_finite_checks();
    let out = loss(&mut tape, store)?;
    scalar_output(&tape, out)?;
    let grads = tape.backward(out)?;
    store.zero_grad();
    tape.accumulate_param_grads(&grads, store)?;

    let mut report = GradCheckReport::new();
    for (name, idx) in coords {
        let t = store
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))?;
        let analytic = t.grad().map(|g| g[*idx]).unwrap_or(0.0);
        let x0 = t.data()[*idx];
        let mut values = t.data().to_vec();
        values[*idx] = x0 + h;
        store.set(name, &values)?;
        let fp = eval(store)?;
        values[*idx] = x0 - h;
        store.set(name, &values)?;
        let fm = eval(store)?;
        values[*idx] = x0;
        store.set(name, &values)?;
        report.record(analytic, (fp - fm) / (2.0 * h));
    }
    store.zero_grad();
    Ok(report)
}
