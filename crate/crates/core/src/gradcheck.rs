//! Central-difference gradient checking against the tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::ParamSet;

/// Builds a scalar loss on a fresh tape from parameters bound with [`Tape::bind`].
pub trait ScalarFn: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> ScalarFn for F {}

fn eval(params: &ParamSet, f: &impl ScalarFn) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let loss = f(&mut tape, &vars)?;
    Ok(tape.data(loss)[0])
}

/// Compares tape gradients with `(f(θ+h) − f(θ−h)) / 2h` on up to
/// `max_coords` trainable coordinates sampled with `seed`.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|)`. Perturbed
/// coordinates are restored bit-exactly and gradients are left cleared.
pub fn finite_diff_check(
    params: &mut ParamSet,
    f: impl ScalarFn,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    assert!(h > 0.0, "step must be positive");
    params.clear_grads();
    {
        let mut tape = Tape::new();
        let vars = tape.bind(params);
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss, params)?;
    }

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.numel()).map(move |j| (id, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, coords.len(), max_coords.min(coords.len()));

    let mut worst = 0.0f64;
    for k in picked.iter() {
        let (id, j) = coords[k];
        let analytic = params.get(id).tensor.grad().map_or(0.0, |g| g[j]);
        let original = params.get(id).tensor.data()[j];

        params.get_mut(id).tensor.data_mut()[j] = original + h;
        let plus = eval(params, &f);
        params.get_mut(id).tensor.data_mut()[j] = original - h;
        let minus = eval(params, &f);
        params.get_mut(id).tensor.data_mut()[j] = original;

        let numeric = (plus? - minus?) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        worst = worst.max(err);
    }
    params.clear_grads();
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamKind, Parameter, Tensor};

    fn single(value: f64) -> ParamSet {
        let mut params = ParamSet::new();
        let t = Tensor::scalar(value);
        params.push(Parameter::new("theta", t, ParamKind::Weight).unwrap()).unwrap();
        params
    }

    #[test]
    fn square_at_three() {
        let mut params = single(3.0);
        let err = finite_diff_check(&mut params, |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        }, 1e-5, 1, 0)
        .unwrap();
        assert!(err < 1e-8, "{err}");
        assert_eq!(params.get(0).tensor.data(), &[3.0]);
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        for h in [1e-6, 1e-3, 0.5, 10.0] {
            let mut params = single(-1.25);
            let err = finite_diff_check(&mut params, |t: &mut Tape, v: &[Var]| {
                let s = t.scale(v[0], 4.0)?;
                let s = t.add_scalar(s, 2.0)?;
                t.sum(s)
            }, h, 1, 0)
            .unwrap();
            assert!(err < 1e-9, "h={h} err={err}");
        }
    }

    #[test]
    fn frozen_coordinates_are_not_sampled() {
        let mut params = single(2.0);
        params.get_mut(0).trainable = false;
        let err = finite_diff_check(&mut params, |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        }, 1e-5, 8, 0)
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
