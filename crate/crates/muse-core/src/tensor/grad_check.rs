//! Central finite-difference gradient verification.

use super::{Elem, Tape, Var};
use crate::error::{MuseError, Result};
use crate::params::{Binding, ParamStore};

/// Worst coordinate found by [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: Elem,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Compare analytic gradients against central finite differences for every
/// scalar in `store`.
///
/// `loss_fn` must rebuild the loss from scratch on the given tape; it is
/// called once for the analytic gradients and twice per parameter coordinate
/// for the differences, so it must be deterministic. Returns the maximum of
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)` over all coordinates.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: Elem, mut loss_fn: F) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &Binding) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(MuseError::Usage("finite_diff_check eps must be positive".into()));
    }

    // analytic pass
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let loss = loss_fn(&mut tape, &binding)?;
    if !tape.data(loss)[0].is_finite() {
        return Err(MuseError::Numeric("non-finite loss in gradient check".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<Elem>> = store.ids().map(|id| grads.of(binding.var(id))).collect();

    let mut report = FdReport { max_rel_err: 0.0, worst_param: String::new(), worst_index: 0 };
    let eval = |store: &ParamStore, loss_fn: &mut F| -> Result<Elem> {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let loss = loss_fn(&mut tape, &binding)?;
        let v = tape.data(loss)[0];
        if !v.is_finite() {
            return Err(MuseError::Numeric("non-finite loss in gradient check".into()));
        }
        Ok(v)
    };

    for id in store.ids().collect::<Vec<_>>() {
        for j in 0..store.tensor(id).numel() {
            let orig = store.tensor(id).data[j];
            store.tensor_mut(id).data[j] = orig + eps;
            let plus = eval(store, &mut loss_fn)?;
            store.tensor_mut(id).data[j] = orig - eps;
            let minus = eval(store, &mut loss_fn)?;
            store.tensor_mut(id).data[j] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic[id.0][j];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}
