//! Parameter storage and the standard layers the architectures are built from.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Activation, BatchNormMode, BatchStats, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f32 = 1e-5;
/// Weight of the old running statistic in the exponential moving average.
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Named trainable tensors plus named non-trainable buffers (running stats).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        t.set_requires_grad(true);
        self.params.push((name.into(), t));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor) -> BufferId {
        self.buffers.push((name.into(), t));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Puts every parameter on `tape`, differentiated iff `trainable`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Bound {
        Bound { vars: self.params.iter().map(|(_, t)| tape.param_with(t, trainable)).collect() }
    }

    /// Folds one backward sweep into the parameters' gradient buffers.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Grads) -> Result<()> {
        for ((_, t), &v) in self.params.iter_mut().zip(&bound.vars) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Replaces a parameter or buffer by name, keeping its shape.
    pub fn load(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .chain(self.buffers.iter_mut())
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Data(format!("unknown tensor name {name}")))?;
        if slot.1.shape() != t.shape() {
            return Err(Error::dim("load", format!("{name}: {} vs {}", slot.1.shape(), t.shape())));
        }
        slot.1.data_mut().copy_from_slice(t.data());
        Ok(())
    }

    /// Every parameter and buffer, in a fixed order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params().chain(self.buffers())
    }

    /// Folds train-mode batch statistics into running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let m = &mut self.buffers[u.mean.0].1;
            blend(m.data_mut(), &u.stats.mean);
            let v = &mut self.buffers[u.var.0].1;
            blend(v.data_mut(), &u.stats.var);
        }
    }
}

fn blend(running: &mut [f32], batch: &[f32]) {
    running.iter_mut().zip(batch).for_each(|(r, b)| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b);
}

/// Tape handles of one [`ParamSet`], in insertion order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update from one train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: BufferId,
    var: BufferId,
    stats: BatchStats,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'t, 'a> {
    pub tape: &'t mut Tape<'a>,
    params: &'a ParamSet,
    bound: &'t Bound,
    pub mode: Mode,
    rng: Option<&'t mut ChaCha8Rng>,
    bn_updates: Vec<BnUpdate>,
    trace: Option<Vec<(String, Shape)>>,
}

impl<'t, 'a> Ctx<'t, 'a> {
    pub fn new(tape: &'t mut Tape<'a>, params: &'a ParamSet, bound: &'t Bound, mode: Mode) -> Self {
        Ctx { tape, params, bound, mode, rng: None, bn_updates: Vec::new(), trace: None }
    }

    /// Supplies randomness for dropout; without it dropout is the identity.
    pub fn with_rng(mut self, rng: &'t mut ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Records per-layer output shapes (batch axis dropped).
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    pub fn record(&mut self, label: &str, v: Var) {
        if let Some(t) = &mut self.trace {
            t.push((label.to_string(), Shape::from(&self.tape.shape(v)[1..])));
        }
    }

    pub fn take_trace(&mut self) -> Vec<(String, Shape)> {
        self.trace.take().unwrap_or_default()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        core::mem::take(&mut self.bn_updates)
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: impl Into<Shape>, std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f32),
    /// He/Kaiming normal, `std = sqrt(2 / fan_in)`.
    He,
}

impl Init {
    pub const DCGAN: Init = Init::Normal(0.02);

    fn sample(self, rng: &mut ChaCha8Rng, shape: Shape, fan_in: usize) -> Tensor {
        let std = match self {
            Init::Normal(s) => s,
            Init::He => libm::sqrtf(2.0 / fan_in as f32),
        };
        normal_tensor(rng, shape, std)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let w = init.sample(rng, Shape::new([out_ch, in_ch, kernel, kernel]), in_ch * kernel * kernel);
        let weight = ps.add(format!("{name}.weight"), w);
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros([out_ch]));
        Conv2d { weight, bias, stride, pad }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, '_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        let y = ctx.tape.conv2d(x, w, self.stride, self.pad)?;
        ctx.tape.add_channel_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let w = init.sample(rng, Shape::new([in_ch, out_ch, kernel, kernel]), in_ch * kernel * kernel);
        let weight = ps.add(format!("{name}.weight"), w);
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros([out_ch]));
        ConvTranspose2d { weight, bias, stride, pad }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, '_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        let y = ctx.tape.conv_transpose2d(x, w, self.stride, self.pad)?;
        ctx.tape.add_channel_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, inputs: usize, outputs: usize, init: Init) -> Self {
        let w = init.sample(rng, Shape::new([inputs, outputs]), inputs);
        let weight = ps.add(format!("{name}.weight"), w);
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros([outputs]));
        Dense { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, '_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        ctx.tape.dense(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full([channels], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: ps.add_buffer(format!("{name}.running_var"), Tensor::full([channels], 1.0)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, '_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        let params = ctx.params;
        let mode = match ctx.mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval {
                mean: params.buffer(self.running_mean).data(),
                var: params.buffer(self.running_var).data(),
            },
        };
        let (y, stats) = ctx.tape.batch_norm(x, g, b, BN_EPS, mode)?;
        if let Some(stats) = stats {
            ctx.bn_updates.push(BnUpdate { mean: self.running_mean, var: self.running_var, stats });
        }
        Ok(y)
    }
}

/// Inverted dropout; active only in train mode with an rng attached.
pub fn dropout(ctx: &mut Ctx<'_, '_>, x: Var, rate: f32) -> Result<Var> {
    if ctx.mode != Mode::Train || rate <= 0.0 {
        return Ok(x);
    }
    let Some(rng) = ctx.rng.as_deref_mut() else { return Ok(x) };
    let n = ctx.tape.value(x).len();
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..n).map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep }).collect();
    ctx.tape.mul_const(x, mask)
}

pub fn activate(ctx: &mut Ctx<'_, '_>, x: Var, kind: Activation) -> Var {
    ctx.tape.activate(x, kind)
}

pub(crate) fn init_normal(rng: &mut ChaCha8Rng, shape: impl Into<Shape>, std: f32) -> Tensor {
    normal_tensor(rng, shape, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dropout_only_in_train_mode() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let _ = Dense::new(&mut ps, &mut rng, "d", 2, 2, Init::DCGAN);
        let x = Tensor::full([1, 1000], 1.0);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let xv = tape.input(x, false);
        let mut drng = ChaCha8Rng::seed_from_u64(2);
        let mut ctx = Ctx::new(&mut tape, &ps, &bound, Mode::Eval).with_rng(&mut drng);
        let y = dropout(&mut ctx, xv, 0.3).unwrap();
        assert_eq!(y, xv);
        ctx.mode = Mode::Train;
        let y = dropout(&mut ctx, xv, 0.3).unwrap();
        let zeros = ctx.tape.value(y).iter().filter(|&&v| v == 0.0).count();
        assert!((200..400).contains(&zeros), "{zeros}");
    }

    #[test]
    fn running_stats_blend() {
        let mut ps = ParamSet::new();
        let bn = BatchNorm::new(&mut ps, "bn", 1);
        let x = Tensor::new([2, 1], alloc::vec![1.0, 3.0]).unwrap();
        let updates = {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape, true);
            let xv = tape.input(x, false);
            let mut ctx = Ctx::new(&mut tape, &ps, &bound, Mode::Train);
            bn.forward(&mut ctx, xv).unwrap();
            ctx.take_bn_updates()
        };
        ps.apply_bn_updates(&updates);
        assert!((ps.buffer(bn.running_mean).data()[0] - 0.2).abs() < 1e-6);
        assert!((ps.buffer(bn.running_var).data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn load_checks_name_and_shape() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros([2]));
        assert!(ps.load("w", &Tensor::full([2], 3.0)).is_ok());
        assert_eq!(ps.params().next().unwrap().1.data(), &[3.0, 3.0]);
        assert!(ps.load("w", &Tensor::zeros([3])).is_err());
        assert!(ps.load("nope", &Tensor::zeros([2])).is_err());
    }
}
