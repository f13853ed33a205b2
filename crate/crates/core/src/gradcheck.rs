//! Central finite-difference verification of reverse-mode gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Rounding error, in ulps of the loss, assumed for each loss evaluation.
pub const LOSS_ULPS: f64 = 4.0;

/// Absolute uncertainty of `(fp − fm) / 2h` when both losses carry
/// [`LOSS_ULPS`] of rounding at machine epsilon `eps`.
pub fn central_difference_resolution(fp: f64, fm: f64, h: f64, eps: f64) -> f64 {
    LOSS_ULPS * eps * fp.abs().max(fm.abs()) / h
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub scalars: usize,
    pub max_rel_err: f64,
    /// Relative error before the rounding discount.
    pub raw_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compare reverse-mode gradients of the scalar built by `f` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every scalar of every listed parameter.
///
/// Disagreement up to [`central_difference_resolution`] is discounted before
/// dividing, so gradients below what the difference can resolve do not read
/// as errors. `f` must be deterministic. Passing a frozen parameter is a
/// contract error.
pub fn grad_check<R, F>(
    store: &mut ParamStore<R>,
    params: &[ParamId],
    h: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    R: Real,
    F: FnMut(&mut Graph<R>, &ParamStore<R>) -> Result<Var>,
{
    for &id in params {
        if store.get(id).frozen {
            return Err(Error::Contract(alloc::format!(
                "grad_check on frozen parameter {}",
                store.get(id).name
            )));
        }
    }
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;
    drop(g);

    let mut eval = |store: &ParamStore<R>| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, store)?;
        Ok(g.value(v).scalar().as_f64())
    };

    let mut report = GradCheckReport::default();
    for &id in params {
        let analytic: Vec<f64> = store.get(id).grad.iter().map(|v| v.as_f64()).collect();
        let (mut worst, mut raw) = (0.0f64, 0.0f64);
        let mut max_abs = 0.0f64;
        for (idx, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = R::from_f64(orig.as_f64() + h);
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = R::from_f64(orig.as_f64() - h);
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let slack = central_difference_resolution(fp, fm, h, R::epsilon().as_f64());
            let denom = numeric.abs().max(REL_FLOOR);
            worst = worst.max(((a - numeric).abs() - slack).max(0.0) / denom);
            raw = raw.max((a - numeric).abs() / denom);
            max_abs = max_abs.max(a.abs());
        }
        report.entries.push(GradCheckEntry {
            name: store.get(id).name.clone(),
            scalars: analytic.len(),
            max_rel_err: worst,
            raw_rel_err: raw,
            max_abs_grad: max_abs,
        });
    }
    Ok(report)
}

/// Same check for plain graph inputs, used to verify individual ops.
/// Returns the maximum relative error over all input scalars.
pub fn grad_check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_inputs_floor(REL_FLOOR, inputs, h, f)
}

/// [`grad_check_inputs`] with a custom denominator floor.
pub fn grad_check_inputs_floor<F>(floor: f64, inputs: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let build = |vals: &[Tensor<f64>], rg: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone(), rg)).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (mut g, vars, out) = build(inputs, true)?;
    g.backward_inputs(out)?;
    let mut vals: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (k, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => alloc::vec![0.0; inputs[k].len()],
        };
        for (idx, &a) in analytic.iter().enumerate() {
            let orig = vals[k].data()[idx];
            vals[k].data_mut()[idx] = orig + h;
            let (gp, _, op) = build(&vals, false)?;
            let fp = gp.value(op).scalar();
            vals[k].data_mut()[idx] = orig - h;
            let (gm, _, om) = build(&vals, false)?;
            let fm = gm.value(om).scalar();
            vals[k].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(floor));
        }
    }
    Ok(worst)
}
