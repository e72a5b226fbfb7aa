//! Central finite-difference oracle for the whole autodiff engine.
//!
//! The checked function is rebuilt on a fresh tape for every perturbed
//! evaluation, so the oracle never shares state with the analytic path.

use super::{Id, Scalar, Tape, TensorData};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Per-parameter relative-error report.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, max relative error over its coordinates)
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` receives a fresh tape and the parameter leaves (in the order of
/// `params`) and must return a scalar loss. `stride` checks every
/// `stride`-th coordinate of each parameter (1 = all).
pub fn grad_check<T, F>(
    params: &[(String, TensorData<T>)],
    f: F,
    step: f64,
    stride: usize,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Id]) -> Result<Id> + Sync,
{
    if step <= 0.0 {
        return Err(Error::Contract("grad_check step must be positive".into()));
    }
    let stride = stride.max(1);
    let eval = |ps: &[TensorData<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<Id> = ps.iter().map(|p| tape.leaf(p, false)).collect();
        let loss = f(&mut tape, &ids)?;
        if tape.numel_of(loss) != 1 {
            return Err(Error::Contract("grad_check function must return a scalar".into()));
        }
        Ok(tape.data_of(loss)[0].as_f64())
    };

    let base: Vec<TensorData<T>> = params.iter().map(|(_, p)| p.clone()).collect();

    // determinism gate: two independent forward passes must agree bitwise
    let l1 = eval(&base)?;
    let l2 = eval(&base)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::Contract(
            "non-deterministic function under grad_check".into(),
        ));
    }

    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<Id> = base.iter().map(|p| tape.leaf(p, true)).collect();
    let loss = f(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&base)
        .map(|(&id, p)| match grads.get(id) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; p.numel()],
        })
        .collect();

    let h = step;
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    let mut coords_checked = 0usize;
    for (pi, (name, p)) in params.iter().enumerate() {
        let coords: Vec<usize> = (0..p.numel()).step_by(stride).collect();
        coords_checked += coords.len();
        let errs: Vec<f64> = coords
            .par_iter()
            .map(|&ci| {
                let mut plus = base.clone();
                plus[pi].data_mut()[ci] = plus[pi].data()[ci] + T::from_f64(h);
                let lp = eval(&plus)?;
                let mut minus = base.clone();
                minus[pi].data_mut()[ci] = minus[pi].data()[ci] - T::from_f64(h);
                let lm = eval(&minus)?;
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic[pi][ci];
                Ok(rel_err(a, numeric))
            })
            .collect::<Result<Vec<f64>>>()?;
        let worst = errs.iter().cloned().fold(0.0f64, f64::max);
        max_rel = max_rel.max(worst);
        per_param.push((name.clone(), worst));
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        coords_checked,
    })
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = (a.abs() + n.abs()).max(1e-8);
    (a - n).abs() / denom
}
