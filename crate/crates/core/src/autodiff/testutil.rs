use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::check_coordinates;
use crate::tensor::{Shape, Tensor};
use crate::{Tape, Var};

pub(crate) fn rand_tensor(shape: impl Into<Shape>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Values with magnitude in [0.1, 1], away from activation kinks.
pub(crate) fn rand_away_from_zero(shape: impl Into<Shape>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1f32..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Finite-difference check of `op` on random inputs, with the output
/// reduced against a fixed random weighting so every output entry matters.
pub(crate) fn check_gradients<F>(shapes: &[&[usize]], op: F)
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> =
        shapes.iter().enumerate().map(|(i, s)| rand_tensor(Shape::from(*s), 100 + i as u64)).collect();
    check_gradients_on(&inputs, op);
}

pub(crate) fn check_gradients_on<F>(inputs: &[Tensor], op: F)
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let report = check_coordinates(inputs, 1e-3, 200, |t, v| {
        let out = op(t, v)?;
        let n = t.value(out).len();
        let w = rand_tensor([n], 999).into_data();
        let shape = t.shape(out).clone();
        let wv = t.constant(shape, w)?;
        let p = t.mul(out, wv)?;
        Ok(t.sum(p))
    })
    .unwrap();
    assert!(
        report.max_rel_error < 1e-3,
        "finite-difference mismatch: rel error {} over {} coords",
        report.max_rel_error,
        report.coords_checked
    );
}
