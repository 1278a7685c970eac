//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it is used to check.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{Mode, ParamGroup, ParamStore, Session};
use crate::tensor::Tensor;

/// Default perturbation for central differences.
pub const STEP: f64 = 1e-5;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub input: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: f64,
}

/// `||a - n|| / max(||a||, ||n||)`, or the absolute error when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Checks `f` (which must reduce to a scalar) against central differences
/// for every input with `requires_grad` set.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with_step(inputs, STEP, f)
}

pub fn check_with_step<F>(inputs: &[Tensor], step: f64, f: F) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut reports = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let analytic = tape
            .grad(vars[idx])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[idx].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[idx].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[idx].data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * step);
        }
        let rel_error = relative_error(&analytic, &numeric);
        reports.push(GradReport {
            input: idx,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(reports)
}

/// Largest relative error over all checked inputs.
pub fn max_rel_error(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.rel_error).fold(0.0, f64::max)
}

/// Gradient check over named parameters of a store. `f` builds a scalar
/// loss on a train-mode session with every group trainable; it runs on
/// scratch copies of `store`, so running statistics in `store` are left
/// alone. Returns one `(name, rel_error)` pair per name.
pub fn check_params<F>(store: &ParamStore, names: &[String], step: f64, f: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    let eval = |st: &mut ParamStore| -> Result<f64> {
        let mut s = Session::new(st, Mode::Train, &ParamGroup::ALL);
        let out = f(&mut s)?;
        Ok(s.tape.value(out).item())
    };

    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    {
        let mut s = Session::new(&mut analytic_store, Mode::Train, &ParamGroup::ALL);
        let out = f(&mut s)?;
        s.backward(out)?;
    }

    let mut work = store.clone();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let p = analytic_store.param(name)?;
        let analytic = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
        let mut numeric = vec![0.0; p.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = store.param(name)?.data()[j];
            work.get_mut(name).expect("present").data_mut()[j] = orig + step;
            let plus = eval(&mut work)?;
            work.get_mut(name).expect("present").data_mut()[j] = orig - step;
            let minus = eval(&mut work)?;
            work.get_mut(name).expect("present").data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        out.push((name.clone(), relative_error(&analytic, &numeric)));
    }
    Ok(out)
}
