//! Central finite-difference checks of tape gradients.

use alloc::vec::Vec;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng;
use crate::{Error, Result};

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
    /// checked coordinates, one entry per input and per parameter.
    pub relative_errors: Vec<f64>,
    pub coords: usize,
    /// Coordinates whose stencil straddled a kink and were re-measured with a
    /// smaller step.
    pub refined: usize,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare the tape gradient of `sum(r * f(x, params))` with central
/// differences of step `h`, where `r` is a fixed random projection drawn from
/// `seed`. `f` receives one leaf per entry of `inputs` and must be
/// deterministic. With `max_coords`, only that many randomly chosen
/// coordinates of each tensor are perturbed.
///
/// When the one-sided differences of a coordinate disagree, a kink (a ReLU
/// or max-pool switch) lies inside the stencil and the central difference
/// is not a derivative estimate; such coordinates are re-measured with the
/// step divided by 10, at most twice.
pub fn check<F>(inputs: &[Tensor], store: &ParamStore, params: &[ParamId], h: f64, seed: u64, max_coords: Option<usize>, mut f: F) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &[Var], &ParamStore) -> Result<Var>,
{
    let mut projection: Option<Tensor> = None;
    let mut proj_rng = rng::seeded(seed, rng::stream::NOISE);
    let mut eval = |inputs: &[Tensor], store: &ParamStore, grad: bool| -> Result<(f64, Option<(Vec<Vec<f64>>, ParamStore)>)> {
        let mut tape = if grad { Tape::new() } else { Tape::inference() };
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &leaves, store)?;
        let r = projection.get_or_insert_with(|| Tensor::from_fn(tape.shape(out), |_| rng::uniform_range(&mut proj_rng, -1.0, 1.0)));
        if r.shape() != tape.shape(out) {
            return Err(Error::shape("checked function changed its output shape"));
        }
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv)?;
        let loss = tape.sum(prod)?;
        let value = tape.value(loss).item();
        if !grad {
            return Ok((value, None));
        }
        tape.backward(loss)?;
        let input_grads = leaves
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; t.numel()]))
            .collect();
        let mut grads = store.clone();
        grads.zero_grads();
        tape.accumulate_param_grads(&mut grads)?;
        Ok((value, Some((input_grads, grads))))
    };

    let (base, analytic) = eval(inputs, store, true)?;
    let (input_grads, param_grads) = analytic.expect("gradients requested");
    let mut pick_rng = rng::seeded(seed, rng::stream::PROBE);
    let mut choose = |n: usize| -> Vec<usize> {
        match max_coords {
            Some(k) if k < n => rng::sample_indices(&mut pick_rng, n, k),
            _ => (0..n).collect(),
        }
    };
    let mut relative_errors = Vec::new();
    let mut coords = 0;
    let mut refined = 0;
    let mut work_inputs = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut pairs = Vec::new();
        for index in choose(inputs[i].numel()) {
            let orig = inputs[i].data()[index];
            let (numeric, steps) = central(base, h, |delta| {
                work_inputs[i].data_mut()[index] = orig + delta;
                let value = eval(&work_inputs, store, false).map(|(v, _)| v);
                work_inputs[i].data_mut()[index] = orig;
                value
            })?;
            refined += usize::from(steps > 1);
            pairs.push((input_grads[i][index], numeric));
        }
        coords += pairs.len();
        relative_errors.push(relative_error(&pairs));
    }
    let mut work = store.clone();
    for &id in params {
        let analytic = param_grads.grad(id).map(|g| g.data().to_vec()).unwrap_or_else(|| alloc::vec![0.0; store.value(id).numel()]);
        let mut pairs = Vec::new();
        for index in choose(store.value(id).numel()) {
            let orig = store.value(id).data()[index];
            let (numeric, steps) = central(base, h, |delta| {
                work.value_mut(id).data_mut()[index] = orig + delta;
                let value = eval(inputs, &work, false).map(|(v, _)| v);
                work.value_mut(id).data_mut()[index] = orig;
                value
            })?;
            refined += usize::from(steps > 1);
            pairs.push((analytic[index], numeric));
        }
        coords += pairs.len();
        relative_errors.push(relative_error(&pairs));
    }
    Ok(GradReport { relative_errors, coords, refined })
}

const KINK_REFINEMENTS: usize = 2;
const KINK_TOLERANCE: f64 = 1e-4;

/// Central difference of `at(delta) = f(x + delta)` around `base = f(x)`,
/// shrinking the step while the one-sided differences disagree. Returns the
/// estimate and the number of steps tried.
fn central(base: f64, h: f64, mut at: impl FnMut(f64) -> Result<f64>) -> Result<(f64, usize)> {
    let mut step = h;
    let mut tries = 0;
    loop {
        tries += 1;
        let plus = at(step)?;
        let minus = at(-step)?;
        let forward = (plus - base) / step;
        let backward = (base - minus) / step;
        let smooth = (forward - backward).abs() <= KINK_TOLERANCE * forward.abs().max(backward.abs()) + 1e-9;
        if smooth || tries > KINK_REFINEMENTS {
            return Ok(((plus - minus) / (2.0 * step), tries));
        }
        step /= 10.0;
    }
}

/// Norm-wise relative error of `(analytic, numeric)` pairs; 0 when both vanish.
pub fn relative_error(pairs: &[(f64, f64)]) -> f64 {
    let (mut diff, mut a, mut n) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        diff += (x - y) * (x - y);
        a += x * x;
        n += y * y;
    }
    let scale = crate::math::sqrt(a.max(n));
    if scale < 1e-12 {
        return crate::math::sqrt(diff);
    }
    crate::math::sqrt(diff) / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn kink_inside_the_stencil_is_refined() {
        // slope 1 left of 3e-6, slope 3 right of it; true derivative at 0 is 1
        let f = |x: f64| if x < 3e-6 { x } else { 3e-6 + 3.0 * (x - 3e-6) };
        let (d, tries) = central(f(0.0), 1e-5, |delta| Ok(f(delta))).unwrap();
        assert_eq!(tries, 2);
        assert!((d - 1.0).abs() < 1e-9);
        let g = |x: f64| x * x + 2.0 * x;
        let (d, tries) = central(g(0.5), 1e-5, |delta| Ok(g(0.5 + delta))).unwrap();
        assert_eq!(tries, 1);
        assert!((d - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relu_next_to_zero_passes() {
        let x = Tensor::new(vec![4], vec![4e-6, -2e-6, 0.7, -0.3]).unwrap();
        let report = check(&[x], &ParamStore::new(), &[], 1e-5, 3, None, |tape, v, _| tape.relu(v[0])).unwrap();
        assert!(report.max_relative_error() < 1e-6, "{report:?}");
        assert_eq!(report.refined, 2);
    }
}
