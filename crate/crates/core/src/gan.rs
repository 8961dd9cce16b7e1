//! Alternating adversarial training: one discriminator step, then one
//! generator step, per real batch.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tape;
use crate::data::mean;
use crate::error::{Error, Result};
use crate::loss::{d_loss, g_loss, GeneratorLoss};
use crate::networks::{Model, IMAGE_SIZE};
use crate::nn::{Ctx, Mode};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Where the generator's DigitCaps input came from on a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedSource {
    /// The architecture takes no DigitCaps input.
    None,
    RealImages,
    /// Experimental only: DigitCaps of the previous generated batch.
    GeneratedImages,
}

/// Which images supply DigitCaps to the capsule-fed generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DigitCapsFeed {
    #[default]
    RealImages,
    /// Feeds DigitCaps of generated images, for comparison runs only.
    ExperimentalGenerated,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub g_loss: GeneratorLoss,
    pub feed: DigitCapsFeed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { adam: AdamConfig::default(), g_loss: GeneratorLoss::default(), feed: DigitCapsFeed::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscStep {
    pub d_loss: f32,
    pub d_real_mean: f32,
    pub d_fake_mean: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanBatchLosses {
    pub d_loss: f32,
    pub g_loss: f32,
    pub d_real_mean: f32,
    pub d_fake_mean: f32,
    pub feed_source: FeedSource,
}

/// Serializable position of the training random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub fn sample_latent(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Tensor {
    Tensor::from_fn([n, len], |_| StandardNormal.sample(rng))
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub d_opt: Adam,
    pub g_opt: Adam,
    rng: ChaCha8Rng,
    step: u64,
    /// Masked DigitCaps of the last generated batch (experimental feed).
    last_fake_caps: Option<Tensor>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, seed: u64) -> Self {
        let d_opt = Adam::new(config.adam, &model.disc.params);
        let g_opt = Adam::new(config.adam, &model.gen.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Trainer { model, config, d_opt, g_opt, rng, step: 0, last_fake_caps: None }
    }

    /// Reassembles a trainer from checkpointed parts.
    pub fn from_parts(model: Model, config: TrainConfig, d_opt: Adam, g_opt: Adam, rng: RngState, step: u64) -> Self {
        Trainer { model, config, d_opt, g_opt, rng: rng.restore(), step, last_fake_caps: None }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One discriminator update followed by one generator update on `real`.
    pub fn train_step(&mut self, real: &Tensor) -> Result<GanBatchLosses> {
        let s = real.shape();
        if s.rank() != 4 || s[1..] != [1, IMAGE_SIZE, IMAGE_SIZE] || s[0] == 0 {
            return Err(Error::dim("train_step", format!("real batch must be N x 1 x 28 x 28, got {s}")));
        }
        let step = self.step + 1;
        let tag = |e: Error| match e {
            Error::Numerical(m) => Error::Numerical(format!("step {step}: {m}")),
            other => other,
        };
        let d = self.discriminator_step(real).map_err(tag)?;
        let (g_loss, feed_source) = self.generator_step(real).map_err(tag)?;
        self.step += 1;
        Ok(GanBatchLosses { d_loss: d.d_loss, g_loss, d_real_mean: d.d_real_mean, d_fake_mean: d.d_fake_mean, feed_source })
    }

    /// DigitCaps for the generator on this step, given the real batch's.
    fn feed(&self, real_caps: Option<Tensor>) -> (Option<Tensor>, FeedSource) {
        if !self.model.gen.needs_digitcaps() {
            return (None, FeedSource::None);
        }
        match (self.config.feed, &self.last_fake_caps) {
            (DigitCapsFeed::ExperimentalGenerated, Some(fake)) => (Some(fake.clone()), FeedSource::GeneratedImages),
            _ => (real_caps, FeedSource::RealImages),
        }
    }

    /// Generates a fresh fake batch and updates the discriminator on it.
    pub fn discriminator_step(&mut self, real: &Tensor) -> Result<DiscStep> {
        let batch = real.shape()[0];
        let real_caps = if self.model.gen.needs_digitcaps() { Some(digitcaps_train(&self.model, real)?) } else { None };
        let (caps, _) = self.feed(real_caps);
        let z = sample_latent(&mut self.rng, batch, self.model.gen.latent_len());
        let fake = generate_batch(&self.model, &z, caps.as_ref(), Mode::Train)?;
        self.discriminator_update(real, &fake)
    }

    /// One Adam step on the discriminator for fixed real and fake batches.
    pub fn discriminator_update(&mut self, real: &Tensor, fake: &Tensor) -> Result<DiscStep> {
        let model = &self.model;
        let mut tape = Tape::new();
        let db = model.disc.bind(&mut tape, true);
        let x = tape.input(real.clone(), false);
        let f = tape.input(fake.clone(), false);
        let mut ctx = Ctx::new(&mut tape, &model.disc.params, &db, Mode::Train).with_rng(&mut self.rng);
        let real_out = model.disc.forward(&mut ctx, x)?;
        let fake_out = model.disc.forward(&mut ctx, f)?;
        let bn = ctx.take_bn_updates();
        drop(ctx);
        if let Some(m) = fake_out.masked {
            self.last_fake_caps = Some(tape.to_tensor(m));
        }
        let loss = d_loss(&mut tape, real_out.score, fake_out.score)?;
        let stats = DiscStep {
            d_loss: tape.scalar(loss),
            d_real_mean: mean(tape.value(real_out.score)),
            d_fake_mean: mean(tape.value(fake_out.score)),
        };
        let grads = tape.backward(loss)?;
        drop(tape);

        let params = &mut self.model.disc.params;
        params.accumulate(&db, &grads)?;
        self.d_opt.step(params)?;
        params.apply_bn_updates(&bn);
        Ok(stats)
    }

    /// Discriminator loss on fixed batches without dropout or updates.
    pub fn discriminator_loss(&self, real: &Tensor, fake: &Tensor) -> Result<f32> {
        let model = &self.model;
        let mut tape = Tape::new();
        let db = model.disc.bind(&mut tape, false);
        let x = tape.input(real.clone(), false);
        let f = tape.input(fake.clone(), false);
        let mut ctx = Ctx::new(&mut tape, &model.disc.params, &db, Mode::Train);
        let r = model.disc.forward(&mut ctx, x)?.score;
        let fk = model.disc.forward(&mut ctx, f)?.score;
        drop(ctx);
        let loss = d_loss(&mut tape, r, fk)?;
        Ok(tape.scalar(loss))
    }

    /// One Adam step on the generator against the current discriminator.
    pub fn generator_step(&mut self, real: &Tensor) -> Result<(f32, FeedSource)> {
        let batch = real.shape()[0];
        let real_caps = if self.model.gen.needs_digitcaps() { Some(digitcaps_train(&self.model, real)?) } else { None };
        let (caps, source) = self.feed(real_caps);
        let z = sample_latent(&mut self.rng, batch, self.model.gen.latent_len());

        let model = &self.model;
        let mut tape = Tape::new();
        let db = model.disc.bind(&mut tape, false);
        let gb = model.gen.bind(&mut tape, true);
        let zv = tape.input(z, false);
        let cv = caps.map(|c| tape.input(c, false));
        let mut gctx = Ctx::new(&mut tape, &model.gen.params, &gb, Mode::Train);
        let fake = model.gen.forward(&mut gctx, zv, cv)?;
        let bn = gctx.take_bn_updates();
        drop(gctx);
        let mut dctx = Ctx::new(&mut tape, &model.disc.params, &db, Mode::Train).with_rng(&mut self.rng);
        let score = model.disc.forward(&mut dctx, fake)?.score;
        drop(dctx);
        let loss = g_loss(&mut tape, score, self.config.g_loss)?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        drop(tape);

        let params = &mut self.model.gen.params;
        params.accumulate(&gb, &grads)?;
        self.g_opt.step(params)?;
        params.apply_bn_updates(&bn);
        Ok((value, source))
    }
}

/// Masked DigitCaps of `images` under the discriminator in eval mode.
pub fn digitcaps(model: &Model, images: &Tensor) -> Result<Tensor> {
    digitcaps_in(model, images, Mode::Eval)
}

fn digitcaps_train(model: &Model, images: &Tensor) -> Result<Tensor> {
    digitcaps_in(model, images, Mode::Train)
}

fn digitcaps_in(model: &Model, images: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let db = model.disc.bind(&mut tape, false);
    let x = tape.input(images.clone(), false);
    let mut ctx = Ctx::new(&mut tape, &model.disc.params, &db, mode);
    let out = model.disc.forward(&mut ctx, x)?;
    drop(ctx);
    let masked = out.masked.ok_or_else(|| Error::Usage("discriminator has no DigitCaps".into()))?;
    Ok(tape.to_tensor(masked))
}

/// Eval-mode generation of `z.len()` images in chunks of `chunk`. The
/// capsule-fed generator pairs the i-th latent row with the i-th image of
/// `reference`.
pub fn generate(model: &Model, z: &Tensor, reference: Option<&Tensor>, chunk: usize) -> Result<Tensor> {
    let n = z.shape()[0];
    let caps = match (model.gen.needs_digitcaps(), reference) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::Usage("this generator needs real reference images for DigitCaps".into()));
        }
        (true, Some(r)) if r.shape()[0] < n => {
            return Err(Error::Usage(format!("{} reference images for {n} samples", r.shape()[0])));
        }
        (true, Some(r)) => Some(r),
    };
    let mut out = Vec::with_capacity(n * IMAGE_SIZE * IMAGE_SIZE);
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let zc = z.slice_outer(start, end)?;
        let cc = caps.map(|r| r.slice_outer(start, end).and_then(|imgs| digitcaps(model, &imgs))).transpose()?;
        out.extend(generate_batch(model, &zc, cc.as_ref(), Mode::Eval)?.into_data());
        start = end;
    }
    Tensor::new([n, 1, IMAGE_SIZE, IMAGE_SIZE], out)
}

fn generate_batch(model: &Model, z: &Tensor, caps: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gb = model.gen.bind(&mut tape, false);
    let zv = tape.input(z.clone(), false);
    let cv = caps.map(|c| tape.input(c.clone(), false));
    let mut ctx = Ctx::new(&mut tape, &model.gen.params, &gb, mode);
    let img = model.gen.forward(&mut ctx, zv, cv)?;
    drop(ctx);
    Ok(tape.to_tensor(img))
}
