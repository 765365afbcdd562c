//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for the relative error, so that entries whose true
/// gradient is (numerically) zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `backward` against `(f(θ+h) − f(θ−h)) / 2h` coordinate-wise.
///
/// `loss` must be a pure function of the store. With `max_coords`, a random
/// subset of coordinates (drawn from `rng`) is checked instead of all.
pub fn check<F, R>(
    store: &ParamStore,
    loss: F,
    step: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
    R: Rng,
{
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let mut coords: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();
    if let Some(n) = max_coords {
        coords.shuffle(rng);
        coords.truncate(n);
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (id, i) in coords {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + step;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - step;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads.get(id).data()[i];
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.name(id).to_string(), i));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Random `[rows × cols]` tensor with entries in `[-1, 1)`.
pub fn random_tensor<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// Reduces a tensor-valued output to a scalar with fixed weights so every
/// output entry influences the loss differently.
pub fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.input(weights.clone());
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}
