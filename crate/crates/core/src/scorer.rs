//! Small convolutional classifier used in place of a pretrained Inception
//! network when scoring generated images.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Tape};
use crate::data::{make_batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{inception_score, ProbMatrix, ScoreReport};
use crate::networks::IMAGE_SIZE;
use crate::nn::{Conv2d, Ctx, Dense, Init, Mode, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const CLASSES: usize = 10;

const WIDTHS: [usize; 2] = [32, 64];
const FLAT: usize = WIDTHS[1] * 7 * 7;
const PREDICT_CHUNK: usize = 256;

/// Which dataset a scorer is trained on; selects the accuracy floor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScorerDataset {
    #[default]
    Mnist,
    Fashion,
}

impl ScorerDataset {
    pub fn accuracy_floor(self) -> f32 {
        match self {
            ScorerDataset::Mnist => 0.97,
            ScorerDataset::Fashion => 0.85,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScorerDataset::Mnist => "mnist",
            ScorerDataset::Fashion => "fashion",
        }
    }
}

impl core::fmt::Display for ScorerDataset {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for ScorerDataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(ScorerDataset::Mnist),
            "fashion" => Ok(ScorerDataset::Fashion),
            other => Err(Error::Usage(format!("unknown scorer dataset {other:?} (expected mnist or fashion)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    /// Trailing images of the training set kept out of training.
    pub holdout: usize,
    pub seed: u64,
    pub dataset: ScorerDataset,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig { epochs: 2, batch: 64, lr: 1e-3, holdout: 5000, seed: 42, dataset: ScorerDataset::Mnist }
    }
}

#[derive(Clone, Debug)]
pub struct Scorer {
    pub params: ParamSet,
    conv1: Conv2d,
    conv2: Conv2d,
    dense: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerTraining {
    pub accuracy: f32,
    pub holdout: usize,
    pub final_loss: f32,
}

impl Scorer {
    /// Two stride-2 conv blocks (28 → 14 → 7) and a dense softmax head.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let conv1 = Conv2d::new(&mut ps, &mut rng, "s.conv1", 1, WIDTHS[0], 4, 2, 1, Init::He);
        let conv2 = Conv2d::new(&mut ps, &mut rng, "s.conv2", WIDTHS[0], WIDTHS[1], 4, 2, 1, Init::He);
        let dense = Dense::new(&mut ps, &mut rng, "s.dense", FLAT, CLASSES, Init::Normal(0.01));
        Scorer { params: ps, conv1, conv2, dense }
    }

    fn logits(&self, ctx: &mut Ctx<'_, '_>, x: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = ctx.tape.activate(h, Activation::leaky());
        let h = self.conv2.forward(ctx, h)?;
        let h = ctx.tape.activate(h, Activation::leaky());
        let batch = ctx.tape.shape(h)[0];
        let flat = ctx.tape.reshape(h, [batch, FLAT])?;
        self.dense.forward(ctx, flat)
    }

    /// Trains on all but the trailing `holdout` images and reports held-out
    /// accuracy; fails with [`Error::AccuracyFloor`] below the dataset floor.
    pub fn train(dataset: &Dataset, config: &ScorerConfig) -> Result<(Scorer, ScorerTraining)> {
        if dataset.labels().is_none() {
            return Err(Error::Data(String::from("scorer training needs labels")));
        }
        if config.batch == 0 || config.epochs == 0 {
            return Err(Error::Usage(String::from("scorer batch and epochs must be positive")));
        }
        if config.holdout == 0 || config.holdout + config.batch > dataset.len() {
            return Err(Error::Usage(format!(
                "holdout {} plus one batch of {} exceeds the {} available images",
                config.holdout,
                config.batch,
                dataset.len()
            )));
        }
        let (train, held) = dataset.split_at(dataset.len() - config.holdout)?;
        let mut scorer = Scorer::new(config.seed);
        let mut opt = Adam::new(AdamConfig { lr: config.lr, beta1: 0.9, ..AdamConfig::default() }, &scorer.params);
        let mut final_loss = f32::NAN;
        for epoch in 0..config.epochs {
            for idx in make_batches(train.len(), config.batch, config.seed, epoch as u64)? {
                let images = train.images_at(&idx)?;
                let labels = train.labels_at(&idx).expect("labels checked above");
                final_loss = scorer.train_batch(&mut opt, images, &labels)?;
            }
        }
        let accuracy = scorer.accuracy(&held)?;
        let floor = config.dataset.accuracy_floor();
        if accuracy < floor {
            return Err(Error::AccuracyFloor { achieved: accuracy, floor });
        }
        Ok((scorer, ScorerTraining { accuracy, holdout: held.len(), final_loss }))
    }

    fn train_batch(&mut self, opt: &mut Adam, images: Tensor, labels: &[usize]) -> Result<f32> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let x = tape.input(images, false);
        let mut ctx = Ctx::new(&mut tape, &self.params, &bound, Mode::Train);
        let logits = self.logits(&mut ctx, x)?;
        drop(ctx);
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numerical(format!("scorer loss {value}")));
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        self.params.accumulate(&bound, &grads)?;
        opt.step(&mut self.params)?;
        Ok(value)
    }

    /// Class posteriors for `N x 1 x 28 x 28` images in `[-1, 1]`.
    pub fn probabilities(&self, images: &Tensor) -> Result<ProbMatrix> {
        let dims = images.shape().dims();
        if dims.len() != 4 || dims[1..] != [1, IMAGE_SIZE, IMAGE_SIZE] || dims[0] == 0 {
            return Err(Error::dim("scorer", format!("expected N x 1 x 28 x 28 images, got {}", images.shape())));
        }
        let n = dims[0];
        let mut values = Vec::with_capacity(n * CLASSES);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let chunk = images.slice_outer(start, (start + PREDICT_CHUNK).min(n))?;
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let x = tape.input(chunk, false);
            let mut ctx = Ctx::new(&mut tape, &self.params, &bound, Mode::Eval);
            let logits = self.logits(&mut ctx, x)?;
            drop(ctx);
            let probs = tape.softmax_last(logits)?;
            values.extend_from_slice(tape.value(probs));
        }
        ProbMatrix::new(n, CLASSES, values)
    }

    /// Index of the most probable class per image, ties to the lowest index.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let probs = self.probabilities(images)?;
        Ok((0..probs.rows())
            .map(|i| {
                let row = probs.row(i);
                (0..CLASSES).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, dataset: &Dataset) -> Result<f32> {
        let labels = dataset.labels().ok_or_else(|| Error::Data(String::from("accuracy needs labels")))?;
        let predicted = self.predict(dataset.images())?;
        let hits = predicted.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
        Ok(hits as f32 / labels.len() as f32)
    }

    /// Inception Score of `images` under this classifier.
    pub fn score(&self, images: &Tensor, splits: usize) -> Result<ScoreReport> {
        inception_score(&self.probabilities(images)?, splits)
    }
}

/// Images of independent uniform pixels over `[-1, 1]`, the noise baseline.
pub fn uniform_noise_images(n: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, 1, IMAGE_SIZE, IMAGE_SIZE], |_| rng.random_range(-1.0f32..=1.0))
}
