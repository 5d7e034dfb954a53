//! Central-difference gradient verification against the tape's adjoints.

use crate::autodiff::graph::{Graph, ParamId, ParamStore};
use crate::autodiff::tape::Var;
use crate::error::{CoreError, Result};

/// Compare analytic gradients with central finite differences for every
/// coordinate of the listed parameters.
///
/// `build` must construct the scalar loss deterministically from the current
/// store contents: any randomness has to be frozen by the caller (clone the
/// stream inside the closure). Returns the maximum relative error
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    epsilon: f64,
    mut build: F,
) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(CoreError::Contract(format!(
            "finite-difference step must lie in [1e-7, 1e-3], got {epsilon}"
        )));
    }
    if ids.is_empty() {
        return Err(CoreError::Contract("no parameters to check".into()));
    }

    store.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let (r, c) = g.tape.shape(loss);
    if r * c != 1 {
        return Err(CoreError::Contract(format!(
            "loss must be scalar, got ({r}, {c})"
        )));
    }
    g.backward(loss)?;
    g.write_grads(store)?;

    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            store
                .tensor(id)
                .grad
                .clone()
                .unwrap_or_else(|| vec![0.0; store.tensor(id).numel()])
        })
        .collect();

    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.tensor(id).numel() {
            let orig = store.tensor(id).values[i];

            store.tensor_mut(id).values[i] = orig + epsilon;
            let up = eval_scalar(&mut build, store)?;
            store.tensor_mut(id).values[i] = orig - epsilon;
            let dn = eval_scalar(&mut build, store)?;
            store.tensor_mut(id).values[i] = orig;

            let numeric = (up - dn) / (2.0 * epsilon);
            let a = analytic[k][i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

fn eval_scalar<F>(build: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.scalar_value(loss)
}
