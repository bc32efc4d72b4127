//! Central finite-difference verification of analytic gradients (64-bit only).

use super::graph::{Graph, Mode, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely: central differences
/// of O(1) objectives carry about 1e-11 of rounding noise at the usual steps,
/// so a relative comparison of a 1e-8 gradient is meaningless.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Relative error used by every check:
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn scalar_output(g: &mut Graph<f64>, out: Var) -> Var {
    if g.value(out).len() == 1 {
        out
    } else {
        g.sum(out)
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(Mode::Train, 0);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let out = scalar_output(&mut g, out);
    let v = g.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("gradient check objective".into()));
    }
    Ok(v)
}

/// Compares the analytic gradient of `f` (sum-reduced when not scalar) with
/// central differences for every element of every input.
///
/// `f` must be deterministic: each evaluation gets a fresh training-mode graph
/// seeded identically, so dropout masks repeat between evaluations.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(Mode::Train, 0);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let out = scalar_output(&mut g, out);
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("gradient check objective".into()));
    }
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut point = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let orig = point[k].data()[i];
            point[k].data_mut()[i] = orig + step;
            let plus = evaluate(&f, &point)?;
            point[k].data_mut()[i] = orig - step;
            let minus = evaluate(&f, &point)?;
            point[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !analytic[i].is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of input {k}")));
            }
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}

/// Same check over entries of parameters held in a store. At most
/// `max_entries` evenly spaced entries of each listed parameter are probed.
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    f: F,
    step: f64,
    max_entries: usize,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let run = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(Mode::Eval, 0);
        let out = f(&mut g, store)?;
        let out = scalar_output(&mut g, out);
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("gradient check objective".into()));
        }
        Ok(v)
    };
    store.zero_grad();
    let mut g = Graph::new(Mode::Eval, 0);
    let out = f(&mut g, store)?;
    let out = scalar_output(&mut g, out);
    let grads = g.backward(out)?;
    g.accumulate_param_grads(&grads, store);
    let mut worst = 0.0f64;
    for &id in ids {
        let n = store.get(id).value.len();
        let stride = (n / max_entries.max(1)).max(1);
        for i in (0..n).step_by(stride).take(max_entries) {
            let analytic = store.get(id).grad.data()[i];
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = run(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = run(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}
