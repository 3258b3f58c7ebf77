//! Finite-difference gradient checks.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_dev: f64,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f64>,
    /// Components left out because their difference stencil straddles a kink.
    pub skipped: usize,
}

/// Largest component-wise `|a - n| / max(|a|, |n|, scale)`, where `scale`
/// is the largest numeric component.
///
/// f32 central differences at eps 1e-3 carry absolute noise of a few 1e-4
/// of the gradient scale, so every entry is judged against that scale rather
/// than its own size.
pub fn relative_deviation(analytic: &[f32], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = scale.max(1e-6);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let a = *a as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

fn eval_scalar(g: &Graph, root: Var) -> Result<f64> {
    if g.value(root).len() != 1 {
        return Err(Error::Contract("gradient checks need a scalar function".into()));
    }
    Ok(g.scalar(root))
}

/// Checks `d f / d x` for a scalar function of one tensor input.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let root = f(&mut g, xv)?;
    eval_scalar(&g, root)?;
    let analytic = g.backward(root)?.dense(&g, xv);
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let probe = |v: f32| -> Result<f64> {
            let mut xp = x.clone();
            xp.data_mut()[i] = v;
            let mut g = Graph::new();
            let var = g.input(xp);
            let r = f(&mut g, var)?;
            eval_scalar(&g, r)
        };
        let (up, down) = (x.data()[i] + eps, x.data()[i] - eps);
        numeric.push((probe(up)? - probe(down)?) / (up as f64 - down as f64));
    }
    Ok(GradCheck {
        max_rel_dev: relative_deviation(&analytic, &numeric),
        analytic,
        numeric,
        skipped: 0,
    })
}

/// Checks the gradients of every trainable parameter of a model.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f32) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_params_smooth(store, f, eps, |_| Ok(Vec::new()))
}

/// Like [`grad_check_params`] for functions with kinks (`|.|`, ReLU).
///
/// `kinks` returns the sign pattern of every kinked operand for given
/// parameters. A component whose `+eps` and `-eps` patterns differ has a kink
/// inside its stencil, where a central difference does not estimate the
/// derivative; it is excluded from the deviation and counted in `skipped`.
pub fn grad_check_params_smooth<F, K>(store: &ParamStore, f: F, eps: f32, kinks: K) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    K: Fn(&ParamStore) -> Result<Vec<bool>>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    eval_scalar(&g, root)?;
    let grads = g.backward(root)?.param_grads(&g, store);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut skipped = 0;
    let mut work = store.clone();
    for id in store.ids().filter(|id| store.is_trainable(*id)) {
        let n = store.get(id).len();
        for i in 0..n {
            let orig = work.get(id).data()[i];
            let (up, down) = (orig + eps, orig - eps);
            work.get_mut(id).data_mut()[i] = up;
            let hi = {
                let mut g = Graph::new();
                let r = f(&mut g, &work)?;
                eval_scalar(&g, r)?
            };
            let sig_up = kinks(&work)?;
            work.get_mut(id).data_mut()[i] = down;
            let lo = {
                let mut g = Graph::new();
                let r = f(&mut g, &work)?;
                eval_scalar(&g, r)?
            };
            let sig_down = kinks(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            if sig_up != sig_down {
                skipped += 1;
                continue;
            }
            analytic.push(grads[id.index()].as_ref().map_or(0.0, |gr| gr[i]));
            numeric.push((hi - lo) / (up as f64 - down as f64));
        }
    }
    Ok(GradCheck {
        max_rel_dev: relative_deviation(&analytic, &numeric),
        analytic,
        numeric,
        skipped,
    })
}
