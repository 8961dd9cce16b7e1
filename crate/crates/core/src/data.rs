//! In-memory image datasets, pixel normalization and seeded batching.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::networks::IMAGE_SIZE;
use crate::tensor::Tensor;

pub const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

/// Maps a byte to `[-1, 1]` via `p / 127.5 - 1`.
pub fn normalize(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize`], rounding and clamping to `[0, 255]`.
pub fn denormalize(x: f32) -> u8 {
    let v = libm::roundf((x + 1.0) * 127.5);
    if v.is_nan() {
        0
    } else {
        v.clamp(0.0, 255.0) as u8
    }
}

/// `N x 1 x 28 x 28` images in `[-1, 1]`, optionally labelled 0..=9.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<u8>>) -> Result<Self> {
        let s = images.shape();
        if s.rank() != 4 || s[1..] != [1, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::Data(format!("images must be N x 1 x 28 x 28, got {s}")));
        }
        if images.data().iter().any(|x| !(-1.0..=1.0).contains(x)) {
            return Err(Error::Data("pixel values outside [-1, 1]".into()));
        }
        if let Some(l) = &labels {
            if l.len() != s[0] {
                return Err(Error::Data(format!("{} labels for {} images", l.len(), s[0])));
            }
            if let Some(bad) = l.iter().find(|&&c| c > 9) {
                return Err(Error::Data(format!("label {bad} outside 0..=9")));
            }
        }
        Ok(Dataset { images, labels })
    }

    /// Builds a dataset from raw bytes, `PIXELS` per image.
    pub fn from_bytes(pixels: &[u8], labels: Option<Vec<u8>>) -> Result<Self> {
        if pixels.is_empty() || pixels.len() % PIXELS != 0 {
            return Err(Error::Data(format!("{} bytes is not a whole number of images", pixels.len())));
        }
        let n = pixels.len() / PIXELS;
        let images = Tensor::new([n, 1, IMAGE_SIZE, IMAGE_SIZE], pixels.iter().map(|&p| normalize(p)).collect())?;
        Self::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let images = self.images.slice_outer(0, n)?;
        let labels = self.labels.as_ref().map(|l| l[..n].to_vec());
        Ok(Dataset { images, labels })
    }

    /// Splits into the first `n` and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Usage(format!("cannot split {} examples at {n}", self.len())));
        }
        let head = self.take(n)?;
        let images = self.images.slice_outer(n, self.len())?;
        let labels = self.labels.as_ref().map(|l| l[n..].to_vec());
        Ok((head, Dataset { images, labels }))
    }

    pub fn images_at(&self, idx: &[usize]) -> Result<Tensor> {
        self.images.select_outer(idx)
    }

    pub fn labels_at(&self, idx: &[usize]) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i] as usize).collect())
    }

    pub fn mean_pixel(&self) -> f32 {
        mean(self.images.data())
    }
}

pub fn mean(x: &[f32]) -> f32 {
    (x.iter().map(|&v| v as f64).sum::<f64>() / x.len().max(1) as f64) as f32
}

/// Shuffled index batches for one epoch, keyed by `(seed, epoch)`. The final
/// partial batch is dropped.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}
