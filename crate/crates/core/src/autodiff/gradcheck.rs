//! Central finite-difference gradient checks.

use crate::error::{Error, Result};

use super::{ParamStore, Tape, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Largest error over all checked entries. An entry whose absolute error
    /// is within `abs_floor` counts as 0; otherwise the error is relative to
    /// the larger of the two magnitudes.
    pub max_error: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_error <= tol
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    pub abs_floor: f64,
    /// Check at most this many entries per tensor, spread evenly.
    pub max_entries: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, abs_floor: 1e-7, max_entries: usize::MAX }
    }
}

fn entry_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn entries(len: usize, max: usize) -> impl Iterator<Item = usize> {
    let step = len.div_ceil(max.max(1)).max(1);
    (0..len).step_by(step)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.shape() != [1, 1] {
        return Err(Error::contract(format!("gradient check needs a scalar output, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Checks the gradient of `f` with respect to each tensor in `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], opts: CheckOptions, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut report = GradReport { max_error: 0.0, checked: 0 };
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].rows(), inputs[k].cols());
        let analytic = grads.get(v).unwrap_or(&zero).clone();
        for e in entries(inputs[k].len(), opts.max_entries) {
            let x0 = xs[k].data()[e];
            xs[k].data_mut()[e] = x0 + opts.step;
            let up = eval(&xs)?;
            xs[k].data_mut()[e] = x0 - opts.step;
            let down = eval(&xs)?;
            xs[k].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * opts.step);
            report.max_error = report.max_error.max(entry_error(analytic.data()[e], numeric, opts.abs_floor));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to every parameter in `store`.
/// `f` must bind parameters through [`Tape::param`].
pub fn check_params<F>(store: &mut ParamStore, opts: CheckOptions, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        scalar(&tape, out)
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;
    let saved: Vec<Option<Tensor>> = store.grads.clone();
    store.zero_grad();
    grads.accumulate(&tape, store);
    let analytic: Vec<Option<Tensor>> = std::mem::replace(&mut store.grads, saved);

    let mut report = GradReport { max_error: 0.0, checked: 0 };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some(a) = analytic[id.0].clone() else { continue };
        for e in entries(a.len(), opts.max_entries) {
            let x0 = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = x0 + opts.step;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[e] = x0 - opts.step;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * opts.step);
            report.max_error = report.max_error.max(entry_error(a.data()[e], numeric, opts.abs_floor));
            report.checked += 1;
        }
    }
    Ok(report)
}
