//! Capsule layers: primary-capsule regrouping, routing by agreement,
//! norm-based masking and the expanding (generative) routing layer.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_normal, Ctx, ParamId, ParamSet};

pub const DEFAULT_ROUTING_ITERS: usize = 3;

/// Snapshot of one routing iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    pub iteration: usize,
    /// Logits `b`, `[batch x in x out]`.
    pub logits: Vec<f32>,
    /// Coupling coefficients `c = softmax_out(b)`, same layout.
    pub coefficients: Vec<f32>,
}

/// Routing by agreement over predictions `uhat[B x I x J x D]`, returning
/// `v[B x J x D]`. Fully unrolled, so gradients pass through all iterations.
pub fn dynamic_routing(tape: &mut Tape<'_>, uhat: Var, iterations: usize) -> Result<Var> {
    route(tape, uhat, iterations, None)
}

/// As [`dynamic_routing`], also returning the per-iteration routing state.
pub fn dynamic_routing_traced(
    tape: &mut Tape<'_>,
    uhat: Var,
    iterations: usize,
) -> Result<(Var, Vec<RoutingState>)> {
    let mut trace = Vec::with_capacity(iterations);
    let v = route(tape, uhat, iterations, Some(&mut trace))?;
    Ok((v, trace))
}

fn route(tape: &mut Tape<'_>, uhat: Var, iterations: usize, mut trace: Option<&mut Vec<RoutingState>>) -> Result<Var> {
    if iterations == 0 {
        return Err(Error::Usage("routing needs at least one iteration".into()));
    }
    let s = tape.shape(uhat).clone();
    if s.rank() != 4 {
        return Err(Error::dim("dynamic_routing", format!("predictions must be rank 4, got {s}")));
    }
    let (b, i, j) = (s[0], s[1], s[2]);
    let mut logits = tape.constant([b, i, j], alloc::vec![0.0; b * i * j])?;
    for r in 0..iterations {
        let c = tape.softmax_last(logits)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(RoutingState {
                iteration: r,
                logits: tape.value(logits).to_vec(),
                coefficients: tape.value(c).to_vec(),
            });
        }
        let sum = tape.routing_sum(c, uhat)?;
        let v = tape.squash(sum)?;
        if r + 1 == iterations {
            return Ok(v);
        }
        let agree = tape.agreement(uhat, v)?;
        logits = tape.add(logits, agree)?;
    }
    unreachable!("loop returns on the last iteration")
}

/// Gather indices turning `[B x (T*D) x H x W]` feature maps into
/// `[B x (T*H*W) x D]` capsules: channel `t*D + d` at position `p` becomes
/// component `d` of capsule `t*H*W + p`.
fn primary_index(batch: usize, types: usize, dim: usize, positions: usize) -> Vec<u32> {
    let per = types * dim * positions;
    let mut idx = Vec::with_capacity(batch * per);
    for b in 0..batch {
        for t in 0..types {
            for p in 0..positions {
                for d in 0..dim {
                    idx.push((b * per + (t * dim + d) * positions + p) as u32);
                }
            }
        }
    }
    idx
}

/// Regroups a feature map into capsules of length `dim` and squashes them.
pub fn primary_caps(tape: &mut Tape<'_>, features: Var, dim: usize) -> Result<Var> {
    let s = tape.shape(features).clone();
    if s.rank() != 4 || dim == 0 || s[1] % dim != 0 {
        return Err(Error::dim("primary_caps", format!("{s} does not split into capsules of dim {dim}")));
    }
    let (b, types, pos) = (s[0], s[1] / dim, s[2] * s[3]);
    let caps = tape.gather(features, primary_index(b, types, dim, pos), [b, types * pos, dim])?;
    tape.squash(caps)
}

/// Inverse of the primary-capsule regrouping: `[B x (T*H*W) x D]` capsules back
/// to a `[B x (T*D) x H x W]` feature map.
pub fn caps_to_feature_map(tape: &mut Tape<'_>, caps: Var, height: usize, width: usize) -> Result<Var> {
    let s = tape.shape(caps).clone();
    let pos = height * width;
    if s.rank() != 3 || pos == 0 || s[1] % pos != 0 {
        return Err(Error::dim("caps_to_feature_map", format!("{s} does not tile {height}x{width}")));
    }
    let (b, types, dim) = (s[0], s[1] / pos, s[2]);
    let fwd = primary_index(b, types, dim, pos);
    let mut inv = alloc::vec![0u32; fwd.len()];
    for (k, &src) in fwd.iter().enumerate() {
        inv[src as usize] = k as u32;
    }
    tape.gather(caps, inv, [b, types * dim, height, width])
}

/// Returns, per batch element, the capsule with the largest norm, `[B x D]`.
/// Ties go to the lowest capsule index.
pub fn mask_by_norm(tape: &mut Tape<'_>, caps: Var) -> Result<Var> {
    let s = tape.shape(caps).clone();
    if s.rank() != 3 {
        return Err(Error::dim("mask_by_norm", format!("expected [batch x caps x dim], got {s}")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let values = tape.value(caps);
    let mut idx = Vec::with_capacity(b * d);
    for bi in 0..b {
        let norms = (0..n).map(|k| values[(bi * n + k) * d..][..d].iter().map(|x| x * x).sum::<f32>());
        let best = norms
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc })
            .0;
        idx.extend((0..d).map(|c| ((bi * n + best) * d + c) as u32));
    }
    tape.gather(caps, idx, [b, d])
}

/// Capsule-to-capsule layer: learned predictions followed by dynamic routing.
#[derive(Clone, Debug)]
pub struct CapsuleLayer {
    pub weight: ParamId,
    pub in_caps: usize,
    pub out_caps: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub iterations: usize,
}

impl CapsuleLayer {
    /// Weights `W[in x out x in_dim x out_dim]` drawn from `N(0, std^2)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_caps: usize,
        out_caps: usize,
        in_dim: usize,
        out_dim: usize,
        iterations: usize,
        std: f32,
    ) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Usage("routing needs at least one iteration".into()));
        }
        let w = init_normal(rng, [in_caps, out_caps, in_dim, out_dim], std);
        let weight = ps.add(format!("{name}.weight"), w);
        Ok(CapsuleLayer { weight, in_caps, out_caps, in_dim, out_dim, iterations })
    }

    pub fn num_weights(&self) -> usize {
        self.in_caps * self.out_caps * self.in_dim * self.out_dim
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, '_>, caps: Var) -> Result<Var> {
        let s = ctx.tape.shape(caps);
        if s.rank() != 3 || s[1] != self.in_caps || s[2] != self.in_dim {
            return Err(Error::dim(
                "capsule_layer",
                format!("expected [batch x {} x {}], got {s}", self.in_caps, self.in_dim),
            ));
        }
        let w = ctx.var(self.weight);
        let uhat = ctx.tape.capsule_predict(caps, w)?;
        dynamic_routing(ctx.tape, uhat, self.iterations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testutil::{check_gradients_on, rand_tensor};
    use crate::nn::{Mode, ParamSet};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn norms(v: &[f32], dim: usize) -> Vec<f32> {
        v.chunks(dim).map(|c| crate::math::sqrt(c.iter().map(|x| x * x).sum())).collect()
    }

    #[test]
    fn single_iteration_is_uniform_mix() {
        let (b, i, j, d) = (2, 7, 5, 4);
        let uhat = rand_tensor([b, i, j, d], 3);
        let mut tape = Tape::new();
        let u = tape.input(uhat.clone(), false);
        let v = dynamic_routing(&mut tape, u, 1).unwrap();
        let c = 1.0f32 / j as f32;
        let mut s = alloc::vec![0.0f32; b * j * d];
        for bi in 0..b {
            for ii in 0..i {
                for jj in 0..j {
                    for k in 0..d {
                        s[(bi * j + jj) * d + k] += c * uhat.data()[((bi * i + ii) * j + jj) * d + k];
                    }
                }
            }
        }
        let mut oracle = Tape::new();
        let sv = oracle.constant([b, j, d], s).unwrap();
        let expect = oracle.squash(sv).unwrap();
        assert_eq!(tape.value(v), oracle.value(expect));
    }

    #[test]
    fn single_output_capsule_gets_everything() {
        let uhat = rand_tensor([1, 6, 1, 3], 4);
        let mut tape = Tape::new();
        let u = tape.input(uhat.clone(), false);
        let (v, trace) = dynamic_routing_traced(&mut tape, u, 3).unwrap();
        assert!(trace.iter().all(|t| t.coefficients.iter().all(|&c| c == 1.0)));
        let mut s = [0.0f32; 3];
        for row in uhat.data().chunks(3) {
            s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let sv = tape.constant([1, 1, 3], s.to_vec()).unwrap();
        let expect = tape.squash(sv).unwrap();
        for (a, b) in tape.value(v).iter().zip(tape.value(expect)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn agreement_concentrates_coupling() {
        let (i, d) = (8, 4);
        let noise = rand_tensor([i, d], 11);
        let mut data = Vec::new();
        for ii in 0..i {
            data.extend([1.0, 0.0, 0.0, 0.0]);
            data.extend_from_slice(&noise.data()[ii * d..(ii + 1) * d]);
        }
        let mut tape = Tape::new();
        let u = tape.input(Tensor::new([1, i, 2, d], data).unwrap(), false);
        let (_, trace) = dynamic_routing_traced(&mut tape, u, 3).unwrap();
        assert!(trace[0].logits.iter().all(|&b| b == 0.0));
        let last = &trace[2].coefficients;
        for row in last.chunks(2) {
            assert!(row[0] > row[1], "{row:?}");
        }
    }

    #[test]
    fn coefficients_normalized_every_iteration() {
        let mut tape = Tape::new();
        let u = tape.input(rand_tensor([3, 9, 4, 5], 2).reshape([3, 9, 4, 5]).unwrap(), false);
        let (_, trace) = dynamic_routing_traced(&mut tape, u, 4).unwrap();
        assert_eq!(trace.len(), 4);
        for t in &trace {
            for row in t.coefficients.chunks(4) {
                assert!(row.iter().all(|&c| c >= 0.0));
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let mut tape = Tape::new();
        let u = tape.input(Tensor::zeros([1, 2, 2, 2]), false);
        assert!(matches!(dynamic_routing(&mut tape, u, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn routing_is_permutation_equivariant() {
        let (i, j, d) = (5, 4, 3);
        let uhat = rand_tensor([1, i, j, d], 21);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = alloc::vec![0.0; uhat.numel()];
        for ii in 0..i {
            for (nj, &oj) in perm.iter().enumerate() {
                let src = &uhat.data()[(ii * j + oj) * d..][..d];
                permuted[(ii * j + nj) * d..][..d].copy_from_slice(src);
            }
        }
        let mut tape = Tape::new();
        let a = tape.input(uhat, false);
        let b = tape.input(Tensor::new([1, i, j, d], permuted).unwrap(), false);
        let va = dynamic_routing(&mut tape, a, 3).unwrap();
        let vb = dynamic_routing(&mut tape, b, 3).unwrap();
        for (nj, &oj) in perm.iter().enumerate() {
            for k in 0..d {
                let (x, y) = (tape.value(va)[oj * d + k], tape.value(vb)[nj * d + k]);
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn routing_gradients_flow_through_all_iterations() {
        let uhat = rand_tensor([2, 4, 3, 3], 8);
        check_gradients_on(&[uhat], |t, v| dynamic_routing(t, v[0], 3));
    }

    #[test]
    fn primary_caps_shapes_and_grouping() {
        let mut tape = Tape::new();
        let f = tape.input(Tensor::from_fn([1, 256, 6, 6], |k| k as f32 * 1e-4), false);
        let caps = primary_caps(&mut tape, f, 8).unwrap();
        assert_eq!(tape.shape(caps).dims(), &[1, 1152, 8]);
        assert!(norms(tape.value(caps), 8).iter().all(|&n| n < 1.0));

        // capsule 37 = type 1, position 1: channels 8..16 at flat position 1
        let mut tape = Tape::new();
        let f = tape.input(Tensor::from_fn([1, 16, 6, 6], |k| k as f32), false);
        let idx = primary_index(1, 2, 8, 36);
        let g = tape.gather(f, idx, [1, 72, 8]).unwrap();
        let cap = &tape.value(g)[37 * 8..38 * 8];
        let expect: Vec<f32> = (8..16).map(|ch| (ch * 36 + 1) as f32).collect();
        assert_eq!(cap, &expect[..]);
        let back = caps_to_feature_map(&mut tape, g, 6, 6).unwrap();
        assert_eq!(tape.value(back), tape.value(f));
    }

    #[test]
    fn primary_caps_zero_and_indivisible() {
        let mut tape = Tape::new();
        let f = tape.input(Tensor::zeros([2, 16, 3, 3]), false);
        let caps = primary_caps(&mut tape, f, 8).unwrap();
        assert!(tape.value(caps).iter().all(|&x| x == 0.0));
        let bad = tape.input(Tensor::zeros([1, 12, 3, 3]), false);
        assert!(matches!(primary_caps(&mut tape, bad, 8), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mask_picks_largest_norm_lowest_on_tie() {
        let mut data = alloc::vec![0.0f32; 2 * 10 * 16];
        for k in 0..16 {
            data[3 * 16 + k] = 0.9 / 4.0;
        }
        data[160 + 2 * 16] = 0.5;
        data[160 + 7 * 16 + 5] = 0.5;
        let mut tape = Tape::new();
        let c = tape.input(Tensor::new([2, 10, 16], data.clone()).unwrap(), false);
        let m = mask_by_norm(&mut tape, c).unwrap();
        assert_eq!(tape.shape(m).dims(), &[2, 16]);
        assert_eq!(&tape.value(m)[..16], &data[48..64]);
        assert_eq!(&tape.value(m)[16..], &data[160 + 32..160 + 48]);

        let c5 = tape.input(rand_tensor([5, 10, 16], 1), false);
        let m5 = mask_by_norm(&mut tape, c5).unwrap();
        assert_eq!(tape.shape(m5).dims(), &[5, 16]);
    }

    fn layer(in_caps: usize, out_caps: usize, in_dim: usize, out_dim: usize) -> (ParamSet, CapsuleLayer) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = CapsuleLayer::new(&mut ps, &mut rng, "caps", in_caps, out_caps, in_dim, out_dim, 3, 0.3).unwrap();
        (ps, l)
    }

    fn run_layer(ps: &ParamSet, l: &CapsuleLayer, input: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let x = tape.input(input, false);
        let mut ctx = Ctx::new(&mut tape, ps, &bound, Mode::Eval);
        let v = l.forward(&mut ctx, x).unwrap();
        tape.to_tensor(v)
    }

    #[test]
    fn digit_caps_shape_and_zero_input() {
        let (ps, l) = layer(1152, 10, 8, 16);
        assert_eq!(l.num_weights(), 1_474_560);
        assert_eq!(ps.num_scalars(), 1152 * 10 * 8 * 16);
        let v = run_layer(&ps, &l, Tensor::zeros([2, 1152, 8]));
        assert_eq!(v.shape().dims(), &[2, 10, 16]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn generative_routing_shape_zero_and_uniform_mix() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = CapsuleLayer::new(&mut ps, &mut rng, "gen", 16, 1152, 8, 8, 1, 4.0).unwrap();
        let v = run_layer(&ps, &l, Tensor::zeros([1, 16, 8]));
        assert_eq!(v.shape().dims(), &[1, 1152, 8]);
        assert!(v.data().iter().all(|&x| x == 0.0));

        let u = rand_tensor([1, 16, 8], 9);
        let v = run_layer(&ps, &l, u.clone());
        let mut tape = Tape::new();
        let uv = tape.input(u, false);
        let w = tape.param(ps.get(l.weight));
        let uhat = tape.capsule_predict(uv, w).unwrap();
        let c = 1.0f32 / 1152.0;
        let uh = tape.value(uhat);
        let mut s = alloc::vec![0.0f32; 1152 * 8];
        for i in 0..16 {
            for j in 0..1152 {
                for k in 0..8 {
                    s[j * 8 + k] += c * uh[(i * 1152 + j) * 8 + k];
                }
            }
        }
        let sv = tape.constant([1, 1152, 8], s).unwrap();
        let expect = tape.squash(sv).unwrap();
        assert_eq!(v.data(), tape.value(expect));
    }

    #[test]
    fn digit_caps_weight_gradient_matches_finite_differences() {
        let (ps, l) = layer(8, 3, 4, 5);
        let u = rand_tensor([2, 8, 4], 13);
        let w = ps.get(l.weight).clone();
        let report = crate::gradcheck::check_coordinates(&[w, u], 1e-3, 200, |t, v| {
            let uhat = t.capsule_predict(v[1], v[0])?;
            let out = dynamic_routing(t, uhat, 3)?;
            let sq = t.mul(out, out)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-2, "{report:?}");
    }

    #[test]
    fn layer_rejects_wrong_input_shape() {
        let (ps, l) = layer(8, 3, 4, 5);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let x = tape.input(Tensor::zeros([1, 8, 5]), false);
        let mut ctx = Ctx::new(&mut tape, &ps, &bound, Mode::Eval);
        assert!(matches!(l.forward(&mut ctx, x), Err(Error::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn squash_bounds_and_direction(v in proptest::collection::vec(-50.0f32..50.0, 1..24)) {
            let d = v.len();
            let mut tape = Tape::new();
            let x = tape.input(Tensor::new([1, d], v.clone()).unwrap(), false);
            let y = tape.squash(x).unwrap();
            let out = tape.value(y);
            let n_in = norms(&v, d)[0];
            let n_out = norms(out, d)[0];
            prop_assert!((0.0..1.0).contains(&n_out));
            if n_in > 1e-6 {
                let dot: f32 = v.iter().zip(out).map(|(a, b)| a * b).sum();
                prop_assert!((dot / (n_in * n_out) - 1.0).abs() < 1e-5);
            }
        }
    }
}
