//! Tape gradients versus central finite differences, per named parameter.

use std::collections::BTreeMap;

use super::{Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Agreement for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    /// `||a - n|| / max(||a||, ||n||, floor)` over the whole tensor.
    pub rel_err: f64,
    pub analytic_norm: f64,
}

/// Compares gradients of the scalar built by `f` for every parameter in `names`
/// (all parameters when `None`). `floor` keeps the relative error finite for
/// tensors whose true gradient is zero.
pub fn check_param_gradients<F>(
    params: &ParamStore,
    names: Option<&[String]>,
    eps: f64,
    floor: f64,
    f: F,
) -> Result<Vec<GroupCheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::InvalidArgument("gradient check needs a scalar output".into()));
    }
    let analytic: BTreeMap<String, Matrix> = tape.param_grads(&tape.backward(out));
    let selected: Vec<String> = match names {
        Some(n) => n.to_vec(),
        None => params.names().map(str::to_string).collect(),
    };
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let o = f(&mut t, p)?;
        let v = t.value(o).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("finite-difference probe".into()))
        }
    };
    let mut work = params.clone();
    let mut report = Vec::with_capacity(selected.len());
    for name in selected {
        let base = params.get(&name).ok_or_else(|| Error::MissingParam(name.clone()))?.clone();
        let a = analytic.get(&name).cloned().unwrap_or_else(|| Matrix::zeros(base.rows(), base.cols()));
        let mut numeric = Matrix::zeros(base.rows(), base.cols());
        for k in 0..base.len() {
            let x0 = base.as_slice()[k];
            work.get_mut(&name).unwrap().as_mut_slice()[k] = x0 + eps;
            let fp = eval(&work)?;
            work.get_mut(&name).unwrap().as_mut_slice()[k] = x0 - eps;
            let fm = eval(&work)?;
            work.get_mut(&name).unwrap().as_mut_slice()[k] = x0;
            numeric.as_mut_slice()[k] = (fp - fm) / (2.0 * eps);
        }
        let diff = a.sub(&numeric)?.frobenius_norm();
        let rel_err = diff / a.frobenius_norm().max(numeric.frobenius_norm()).max(floor);
        report.push(GroupCheck { name, rel_err, analytic_norm: a.frobenius_norm() });
    }
    Ok(report)
}
