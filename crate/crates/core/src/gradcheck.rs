//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it is used to verify.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::networks::{Model, IMAGE_SIZE};
use crate::nn::{Bound, Ctx, Mode, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
    pub max_rel_error: f32,
    pub coords_checked: usize,
    /// Coordinates left out because the difference quotient was unstable
    /// under step halving (an activation kink inside the step).
    pub coords_skipped: usize,
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param_with(t, false)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.scalar(loss) as f64)
}

fn analytic<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f32>>>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param_with(t, true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map(<[f32]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; t.numel()]))
        .collect())
}

fn rel(a: f64, n: f64) -> f32 {
    ((a - n).abs() / a.abs().max(n.abs()).max(1.0)) as f32
}

/// Coordinate-wise check of every input. Inputs with more than
/// `max_coords` elements are probed at evenly strided coordinates.
pub fn check_coordinates<F>(inputs: &[Tensor], h: f32, max_coords: usize, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let grads = analytic(inputs, &f)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f32;
    let mut checked = 0;
    for ti in 0..inputs.len() {
        let n = inputs[ti].numel();
        let step = n.div_ceil(max_coords.max(1)).max(1);
        for ci in (0..n).step_by(step) {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let plus = eval(&work, &f)?;
            work[ti].data_mut()[ci] = orig - h;
            let minus = eval(&work, &f)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * h as f64);
            worst = worst.max(rel(grads[ti][ci] as f64, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error: worst, coords_checked: checked, coords_skipped: 0 })
}

/// Checks the directional derivative along `directions` random unit
/// directions spanning all inputs at once.
pub fn check_directional<F>(inputs: &[Tensor], h: f32, directions: usize, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let grads = analytic(inputs, &f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for _ in 0..directions {
        let mut dirs: Vec<Vec<f32>> =
            inputs.iter().map(|t| (0..t.numel()).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
        let norm = dirs.iter().flatten().map(|&d| (d as f64) * (d as f64)).sum::<f64>();
        let norm = libm::sqrt(norm);
        dirs.iter_mut().flatten().for_each(|d| *d = (*d as f64 / norm) as f32);
        let a: f64 = grads
            .iter()
            .zip(&dirs)
            .flat_map(|(g, d)| g.iter().zip(d).map(|(x, y)| *x as f64 * *y as f64))
            .sum();
        let shifted = |sign: f32| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(t, d)| {
                    let mut t = t.clone();
                    t.data_mut().iter_mut().zip(d).for_each(|(x, y)| *x += sign * h * y);
                    t
                })
                .collect()
        };
        let numeric = (eval(&shifted(1.0), &f)? - eval(&shifted(-1.0), &f)?) / (2.0 * h as f64);
        worst = worst.max(rel(a, numeric));
    }
    Ok(GradCheckReport { max_rel_error: worst, coords_checked: directions, coords_skipped: 0 })
}

/// Coordinate-wise check of a network's parameter gradients. `analytic`
/// holds one gradient per parameter in [`ParamSet`] order and `loss`
/// re-evaluates the forward pass on perturbed copies.
///
/// Each coordinate is differenced at `h` and `h / 2`. Where the two
/// quotients disagree by more than `KINK_TOLERANCE` the step straddles a
/// non-differentiable point; such coordinates are counted as skipped. A wrong
/// backward rule still shows up, as a stable quotient far from `analytic`.
pub fn check_params<F>(params: &ParamSet, analytic: &[Vec<f32>], h: f32, max_coords: usize, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<f32>,
{
    if analytic.len() != params.len() {
        return Err(Error::Usage(alloc::format!("{} gradients for {} parameters", analytic.len(), params.len())));
    }
    let mut work = params.clone();
    let mut quotient = |ti: usize, ci: usize, step: f32| -> Result<f64> {
        let orig = nth(&mut work, ti)[ci];
        nth(&mut work, ti)[ci] = orig + step;
        let plus = loss(&work)? as f64;
        nth(&mut work, ti)[ci] = orig - step;
        let minus = loss(&work)? as f64;
        nth(&mut work, ti)[ci] = orig;
        Ok((plus - minus) / (2.0 * step as f64))
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, coords_skipped: 0 };
    for (ti, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for ci in (0..n).step_by(stride) {
            let coarse = quotient(ti, ci, h)?;
            let fine = quotient(ti, ci, h / 2.0)?;
            if rel(coarse, fine) > KINK_TOLERANCE {
                report.coords_skipped += 1;
                continue;
            }
            report.max_rel_error = report.max_rel_error.max(rel(grad[ci] as f64, fine));
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

const KINK_TOLERANCE: f32 = 5e-3;

fn nth(ps: &mut ParamSet, i: usize) -> &mut [f32] {
    ps.params_mut().nth(i).expect("index in range").data_mut()
}

/// Discriminator and generator reports from [`check_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelGradReport {
    pub discriminator: GradCheckReport,
    pub generator: GradCheckReport,
}

/// End-to-end check of both networks of `model` on seeded random inputs.
///
/// The discriminator loss is a weighted sum of scores, the generator loss a
/// sparse weighted sum of pixels. Weight matrices are first scaled up 25x:
/// batch norm makes the loss scale invariant, so at the 0.02-scale init the
/// curvature is too high for central differences in f32.
pub fn check_model(model: &Model, seed: u64, batch: usize, max_coords: usize) -> Result<ModelGradReport> {
    let mut model = model.clone();
    enlarge_weights(&mut model.disc.params, 25.0);
    enlarge_weights(&mut model.gen.params, 25.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0));

    let x = uniform(&[batch, 1, IMAGE_SIZE, IMAGE_SIZE]);
    let (_, dg) = disc_loss(&model, &model.disc.params, &x, true)?;
    let discriminator = check_params(&model.disc.params, &dg, 1e-3, max_coords, |ps| Ok(disc_loss(&model, ps, &x, false)?.0))?;

    let z = uniform(&[batch, model.gen.latent_len()]);
    let caps = match (model.gen.needs_digitcaps(), model.caps_dim()) {
        (true, Some(d)) => Some(uniform(&[batch, d])),
        _ => None,
    };
    let pixels = uniform(&[batch * IMAGE_SIZE * IMAGE_SIZE]);
    let (_, gg) = gen_loss(&model, &model.gen.params, &z, caps.as_ref(), &pixels, true)?;
    let generator = check_params(&model.gen.params, &gg, 2e-4, max_coords, |ps| {
        Ok(gen_loss(&model, ps, &z, caps.as_ref(), &pixels, false)?.0)
    })?;
    Ok(ModelGradReport { discriminator, generator })
}

fn enlarge_weights(ps: &mut ParamSet, k: f32) {
    // Routing weights stay as they are: scaling them sharpens the routing
    // softmax instead of flattening anything.
    let big: Vec<bool> = ps
        .params()
        .map(|(n, t)| n.ends_with(".weight") && (t.shape().rank() == 2 || is_conv(n, t)))
        .collect();
    for (t, big) in ps.params_mut().zip(big) {
        if big {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

fn is_conv(name: &str, t: &Tensor) -> bool {
    t.shape().rank() == 4 && (name.contains("conv") || name.contains("primary"))
}

type LossAndGrads = (f32, Vec<Vec<f32>>);

fn disc_loss(model: &Model, params: &ParamSet, x: &Tensor, with_grads: bool) -> Result<LossAndGrads> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, with_grads);
    let xv = tape.input(x.clone(), false);
    let mut ctx = Ctx::new(&mut tape, params, &bound, Mode::Train);
    let score = model.disc.forward(&mut ctx, xv)?.score;
    let n = tape.value(score).len();
    let w = tape.constant([n, 1], (0..n).map(|i| 0.5 + i as f32).collect())?;
    let weighted = tape.mul(score, w)?;
    let loss = tape.sum(weighted);
    finish(params, &bound, &tape, loss, with_grads)
}

fn gen_loss(
    model: &Model,
    params: &ParamSet,
    z: &Tensor,
    caps: Option<&Tensor>,
    pixels: &Tensor,
    with_grads: bool,
) -> Result<LossAndGrads> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, with_grads);
    let zv = tape.input(z.clone(), false);
    let cv = caps.map(|c| tape.input(c.clone(), false));
    let mut ctx = Ctx::new(&mut tape, params, &bound, Mode::Train);
    let img = model.gen.forward(&mut ctx, zv, cv)?;
    // Sparse weighting keeps the loss small, so f32 rounding stays below
    // the finite-difference signal at small steps.
    let w = pixels.data().iter().enumerate().map(|(k, &v)| if k % 97 == 0 { v } else { 0.0 }).collect();
    let w = tape.constant(tape.shape(img).clone(), w)?;
    let weighted = tape.mul(img, w)?;
    let loss = tape.sum(weighted);
    finish(params, &bound, &tape, loss, with_grads)
}

fn finish(params: &ParamSet, bound: &Bound, tape: &Tape<'_>, loss: Var, with_grads: bool) -> Result<LossAndGrads> {
    let value = tape.scalar(loss);
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    let mut copy = params.clone();
    copy.accumulate(bound, &grads)?;
    let grads = copy.params().map(|(_, t)| t.grad().map(<[f32]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; t.numel()]));
    Ok((value, grads.collect()))
}
