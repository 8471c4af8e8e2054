use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar computation with central differences.
///
/// Returns `max |analytic − numeric| / (|analytic| + |numeric| + 1e-12)` over every
/// scalar coordinate of the parameters in `ids`. The computation must be
/// deterministic: a train-mode dropout, or two evaluations disagreeing, is a
/// contract error.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!(
            "grad_check step must lie in (0, 1e-2], got {eps}"
        )));
    }
    store.zero_grad();
    let base = {
        let (mut tape, out) = record(&mut f, store)?;
        let v = tape.scalar(out);
        tape.backward(out, store)?;
        v
    };
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let (tape, out) = record(&mut f, store)?;
        Ok(tape.scalar(out))
    };
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "grad_check: repeated evaluation gave a different value".into(),
        ));
    }
    let analytic = store.flat_grads(ids);
    let mut x = store.flat_values(ids);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        store.set_flat_values(ids, &x)?;
        let up = eval(store)?;
        x[i] = orig - eps;
        store.set_flat_values(ids, &x)?;
        let down = eval(store)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    store.set_flat_values(ids, &x)?;
    Ok(worst)
}

fn record<F>(f: &mut F, store: &ParamStore) -> Result<(Tape, Var)>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if tape.is_stochastic() {
        return Err(Error::Contract(
            "grad_check requires a deterministic computation".into(),
        ));
    }
    Ok((tape, out))
}
