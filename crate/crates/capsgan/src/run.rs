//! Training driver: epochs of shuffled batches, a per-step metrics CSV,
//! periodic checkpoints and sample grids.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use capsgan_core::data::{make_batches, Dataset};
use capsgan_core::gan::{generate, sample_latent, GanBatchLosses, TrainConfig, Trainer};
use capsgan_core::networks::{Model, ModelConfig};
use capsgan_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::pgm::write_image_grid;

pub const METRICS_HEADER: &str = "step,epoch,d_loss,g_loss,d_real_mean,d_fake_mean,time_ms";
pub const FINAL_CHECKPOINT: &str = "ckpt-final";
pub const METRICS_FILE: &str = "metrics.csv";

/// Side of the square sample grid written during training.
const SAMPLE_GRID: usize = 8;
const GENERATE_CHUNK: usize = 64;

const LATENT_STREAM: u64 = 2;
const REFERENCE_STREAM: u64 = 3;

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Steps between checkpoints; 0 writes only the final one.
    pub ckpt_every: usize,
    /// Steps between sample grids; 0 writes only the final one.
    pub sample_every: usize,
    /// Writes wall-clock step times; off keeps the CSV reproducible.
    pub record_time: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub last: Option<GanBatchLosses>,
}

fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt-step{step:06}"))
}

fn samples_path(out: &Path, tag: &str) -> PathBuf {
    out.join(format!("samples-{tag}.pgm"))
}

/// Trains from scratch, logging progress lines to `log`. A numerical failure
/// aborts the run; checkpoints already written are left in place.
pub fn train_run(opts: &RunOptions, dataset: &Dataset, log: &mut dyn Write) -> Result<RunSummary> {
    if opts.epochs == 0 || opts.batch == 0 {
        return Err(Error::Usage("epochs and batch size must be positive".into()));
    }
    if dataset.len() < opts.batch {
        return Err(Error::Usage(format!("{} images cannot fill one batch of {}", dataset.len(), opts.batch)));
    }
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let model = Model::build(opts.model.clone(), opts.seed)?;
    let _ = writeln!(log, "model: {}", model.describe());
    let mut trainer = Trainer::new(model, opts.train, opts.seed);

    let sample_n = SAMPLE_GRID * SAMPLE_GRID;
    let sample_z = latent_batch(opts.seed, sample_n, trainer.model.gen.latent_len());
    let reference = trainer.model.gen.needs_digitcaps().then(|| reference_images(dataset, sample_n, opts.seed));

    let metrics_path = opts.out.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let csv_err = |e| Error::io(&metrics_path, e);
    writeln!(metrics, "{METRICS_HEADER}").map_err(csv_err)?;

    let mut last = None;
    for epoch in 0..opts.epochs {
        for idx in make_batches(dataset.len(), opts.batch, opts.seed, epoch as u64)? {
            let real = dataset.images_at(&idx)?;
            let started = Instant::now();
            let losses = match trainer.train_step(&real) {
                Ok(l) => l,
                Err(e) => {
                    let _ = metrics.flush();
                    let _ = writeln!(log, "aborting: {e}");
                    return Err(e.into());
                }
            };
            let time_ms = if opts.record_time { started.elapsed().as_millis() } else { 0 };
            let step = trainer.step();
            writeln!(
                metrics,
                "{step},{epoch},{},{},{},{},{time_ms}",
                losses.d_loss, losses.g_loss, losses.d_real_mean, losses.d_fake_mean
            )
            .map_err(csv_err)?;
            metrics.flush().map_err(csv_err)?;
            let _ = writeln!(
                log,
                "step {step} epoch {epoch}: d_loss {:.4} g_loss {:.4} D(x) {:.3} D(G(z)) {:.3}",
                losses.d_loss, losses.g_loss, losses.d_real_mean, losses.d_fake_mean
            );
            if opts.ckpt_every > 0 && step % opts.ckpt_every as u64 == 0 {
                Checkpoint::from_trainer(&trainer).save(&checkpoint_path(&opts.out, step))?;
            }
            if opts.sample_every > 0 && step % opts.sample_every as u64 == 0 {
                let images = generate(&trainer.model, &sample_z, reference.as_ref(), GENERATE_CHUNK)?;
                write_image_grid(&images, SAMPLE_GRID, SAMPLE_GRID, &samples_path(&opts.out, &format!("step{step:06}")))?;
            }
            last = Some(losses);
        }
    }
    let final_checkpoint = opts.out.join(FINAL_CHECKPOINT);
    Checkpoint::from_trainer(&trainer).save(&final_checkpoint)?;
    let images = generate(&trainer.model, &sample_z, reference.as_ref(), GENERATE_CHUNK)?;
    write_image_grid(&images, SAMPLE_GRID, SAMPLE_GRID, &samples_path(&opts.out, "final"))?;
    Ok(RunSummary { steps: trainer.step(), final_checkpoint, last })
}

/// Latent batch from a stream reserved for sampling, separate from training.
pub fn latent_batch(seed: u64, n: usize, len: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LATENT_STREAM);
    sample_latent(&mut rng, n, len)
}

/// `n` dataset images in a seeded order, cycling when `n` exceeds the set.
pub fn reference_images(dataset: &Dataset, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(REFERENCE_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let idx: Vec<usize> = order.iter().copied().cycle().take(n).collect();
    dataset.images_at(&idx).expect("indices within the dataset")
}

/// Samples `n` images in eval mode; `reference` supplies DigitCaps for the
/// capsule-fed generator.
pub fn sample_images(model: &Model, n: usize, seed: u64, reference: Option<&Dataset>) -> Result<Tensor> {
    let z = latent_batch(seed, n, model.gen.latent_len());
    let reference = match (model.gen.needs_digitcaps(), reference) {
        (false, _) => None,
        (true, Some(d)) => Some(reference_images(d, n, seed)),
        (true, None) => {
            return Err(Error::Usage(format!(
                "{} samples need DigitCaps of real images: pass --data",
                model.arch()
            )))
        }
    };
    Ok(generate(model, &z, reference.as_ref(), GENERATE_CHUNK)?)
}
