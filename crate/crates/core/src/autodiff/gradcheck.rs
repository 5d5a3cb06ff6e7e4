//! Central finite-difference oracle for the tape.

use super::graph::{Graph, Mode, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the per-coordinate relative error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Result of comparing autodiff against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub coords: usize,
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Checks `d f / d x` for a scalar-valued graph function `f`.
///
/// `f` is evaluated on an eval-mode graph so dropout is inactive.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.gradients(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new(Mode::Eval);
        let v = g.input(probe.clone());
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        coords: x.len(),
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = relative_error(analytic.data()[i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Checks gradients of a scalar loss with respect to every parameter in
/// `store`. `max_coords_per_param` limits the probes per tensor (evenly
/// strided) to keep large models tractable; `None` checks everything.
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    f: F,
    eps: f64,
    max_coords_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new(Mode::Eval);
    let out = f(&mut g, store)?;
    g.backward(out, store)?;
    let analytic: Vec<Option<Tensor<f64>>> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grad();

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(Mode::Eval);
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        coords: 0,
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.value(id).len();
        let stride = match max_coords_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[k].as_ref().map_or(0.0, |t| t.data()[i]);
            let err = relative_error(a, numeric);
            report.coords += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = report.coords - 1;
            }
        }
    }
    Ok(report)
}
