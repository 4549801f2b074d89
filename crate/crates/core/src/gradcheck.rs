//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates the forward pass, so it shares no code
//! path with [`Graph::backward`](crate::autograd::Graph::backward).

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Worst `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over checked tensors.
    pub max_rel_error: f64,
    /// Number of scalar coordinates probed.
    pub probed: usize,
}

/// Norm-relative error between two gradient samples.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum();
    let na: f64 = analytic.iter().map(|a| a * a).sum();
    let nn: f64 = numeric.iter().map(|n| n * n).sum();
    let denom = libm::sqrt(na.max(nn));
    if denom < 1e-12 {
        libm::sqrt(diff)
    } else {
        libm::sqrt(diff) / denom
    }
}

/// Check gradients of `f` with respect to every coordinate of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], f: &F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_inputs_with(inputs, f, h, Graph::inference)
}

/// As [`check_inputs`], with a caller-supplied graph constructor (e.g. a
/// training-mode graph whose dropout seed is fixed).
pub fn check_inputs_with<F, G>(inputs: &[Tensor], f: &F, h: f64, make: G) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    G: Fn() -> Graph,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = make();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = make();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probed = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|t| t.data().to_vec()).unwrap_or_else(|| alloc::vec![0.0; input.len()]);
        let mut numeric = Vec::with_capacity(input.len());
        for i in 0..input.len() {
            let x = input.data()[i];
            work[k].data_mut()[i] = x + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x;
            numeric.push((up - down) / (2.0 * h));
        }
        probed += input.len();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { max_rel_error: worst, probed })
}

/// Check parameter gradients of a loss built by `f` over `store`.
///
/// At most `per_param` randomly chosen coordinates of each listed parameter
/// are probed. `make` must build graphs that track exactly `ids`.
pub fn check_params<F, G>(
    store: &mut ParamStore,
    ids: &[ParamId],
    per_param: usize,
    seed: u64,
    h: f64,
    make: G,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
    G: Fn() -> Graph,
{
    let mut g = make();
    let out = f(store, &mut g)?;
    let grads = g.backward(out)?;
    let analytic_all: Vec<Option<Tensor>> = ids.iter().map(|&id| grads.param(id).cloned()).collect();
    drop(g);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = make();
        let out = f(store, &mut g)?;
        Ok(g.value(out).item())
    };
    let mut r = rng::seeded(seed);
    let mut worst = 0.0f64;
    let mut probed = 0;
    for (k, &id) in ids.iter().enumerate() {
        let n = store.get(id).len();
        let mut coords: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut r, &mut coords);
        coords.truncate(per_param);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &coords {
            analytic.push(analytic_all[k].as_ref().map(|t| t.data()[i]).unwrap_or(0.0));
            let x = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = x + h;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = x - h;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = x;
            numeric.push((up - down) / (2.0 * h));
        }
        probed += coords.len();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { max_rel_error: worst, probed })
}
