//! The `capsgan` command line.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::PathBuf;

use capsgan_core::data::Dataset;
use capsgan_core::gan::{DigitCapsFeed, TrainConfig};
use capsgan_core::loss::GeneratorLoss;
use capsgan_core::metrics::inception_score;
use capsgan_core::networks::{ArchitectureId, ModelConfig};
use capsgan_core::optim::AdamConfig;
use capsgan_core::scorer::{Scorer, ScorerConfig, ScorerDataset};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::idx::load_idx;
use crate::pgm::write_image_grid;
use crate::run::{sample_images, train_run, RunOptions};
use crate::score::report_csv;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(name = "capsgan", version, args_override_self = true)]
#[command(about = "Train, sample and score capsule GANs on 28x28 grayscale images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a GAN and write checkpoints, metrics.csv and sample grids.
    Train(TrainArgs),
    /// Write a PGM grid of samples from a checkpoint.
    Generate(GenerateArgs),
    /// Print the Inception Score of samples or of an image file as CSV.
    Score(ScoreArgs),
    /// Train the classifier used for scoring.
    TrainScorer(TrainScorerArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ArchArg {
    Dcgan,
    Capsgan1,
    Capsgan2,
    Capsgan3,
}

impl From<ArchArg> for ArchitectureId {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Dcgan => ArchitectureId::Dcgan,
            ArchArg::Capsgan1 => ArchitectureId::CapsGan1,
            ArchArg::Capsgan2 => ArchitectureId::CapsGan2,
            ArchArg::Capsgan3 => ArchitectureId::CapsGan3,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GLossArg {
    #[value(name = "non_saturating")]
    NonSaturating,
    Minimax,
}

impl From<GLossArg> for GeneratorLoss {
    fn from(g: GLossArg) -> Self {
        match g {
            GLossArg::NonSaturating => GeneratorLoss::NonSaturating,
            GLossArg::Minimax => GeneratorLoss::Minimax,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScaleArg {
    Full,
    Small,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScorerDatasetArg {
    Mnist,
    Fashion,
}

impl From<ScorerDatasetArg> for ScorerDataset {
    fn from(d: ScorerDatasetArg) -> Self {
        match d {
            ScorerDatasetArg::Mnist => ScorerDataset::Mnist,
            ScorerDatasetArg::Fashion => ScorerDataset::Fashion,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub arch: ArchArg,
    /// IDX image file.
    #[arg(long)]
    pub data: PathBuf,
    /// IDX label file (unused by training, validated when given).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Train on only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Adam learning rate for both networks.
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f32,
    #[arg(long, default_value_t = 3)]
    pub routing_iters: usize,
    /// Latent length [default: 100, or 128 for capsgan3].
    #[arg(long)]
    pub latent: Option<usize>,
    #[arg(long, value_enum, default_value_t = GLossArg::NonSaturating)]
    pub g_loss: GLossArg,
    /// Layer widths: the published sizes or a tiny variant for smoke runs.
    #[arg(long, value_enum, default_value_t = ScaleArg::Full)]
    pub scale: ScaleArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Steps between checkpoints (0: final only).
    #[arg(long, default_value_t = 500)]
    pub ckpt_every: usize,
    /// Steps between sample grids (0: final only).
    #[arg(long, default_value_t = 500)]
    pub sample_every: usize,
    /// Record wall-clock step times in metrics.csv (breaks byte reproducibility).
    #[arg(long, default_value_t = false)]
    pub record_time: bool,
    /// capsgan2 only: feed the generator DigitCaps of generated images
    /// instead of real ones. For comparison experiments.
    #[arg(long, default_value_t = false)]
    pub experimental_generated_feed: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Grid as ROWSxCOLS.
    #[arg(long, default_value = "8x8", value_parser = parse_grid)]
    pub grid: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// IDX images supplying DigitCaps (required for capsgan2).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Generator checkpoint to sample from.
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    pub ckpt: Option<PathBuf>,
    /// IDX images to score directly.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub scorer: PathBuf,
    /// Samples to generate when scoring a checkpoint.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// IDX images supplying DigitCaps (required for capsgan2).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainScorerArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    /// Trailing images held out for the accuracy check.
    #[arg(long, default_value_t = 5000)]
    pub holdout: usize,
    /// Use only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Selects the accuracy floor (mnist 0.97, fashion 0.85).
    #[arg(long, value_enum, default_value_t = ScorerDatasetArg::Mnist)]
    pub dataset: ScorerDatasetArg,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once('x').ok_or_else(|| format!("grid {s:?} is not ROWSxCOLS"))?;
    let parse = |v: &str| v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad grid size {v:?}"));
    Ok((parse(r)?, parse(c)?))
}

fn limited(dataset: Dataset, limit: Option<usize>) -> Result<Dataset> {
    match limit {
        Some(n) if n < dataset.len() => Ok(dataset.take(n)?),
        _ => Ok(dataset),
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Usage(format!("--{name} must be positive")));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let arch = ArchitectureId::from(args.arch);
    let base = match args.scale {
        ScaleArg::Full => ModelConfig::new(arch),
        ScaleArg::Small => ModelConfig::small(arch),
    };
    let model = ModelConfig {
        routing_iters: args.routing_iters,
        latent: args.latent.unwrap_or(base.latent),
        ..base
    };
    model.validate()?;
    positive("epochs", args.epochs)?;
    positive("batch", args.batch)?;
    if !(args.lr > 0.0 && args.lr.is_finite()) {
        return Err(Error::Usage("--lr must be positive".into()));
    }
    if args.experimental_generated_feed && arch != ArchitectureId::CapsGan2 {
        return Err(Error::Usage("--experimental-generated-feed applies to capsgan2 only".into()));
    }
    let feed = if args.experimental_generated_feed { DigitCapsFeed::ExperimentalGenerated } else { DigitCapsFeed::RealImages };
    let train = TrainConfig { adam: AdamConfig { lr: args.lr, ..AdamConfig::default() }, g_loss: args.g_loss.into(), feed };
    let _ = writeln!(
        out,
        "config: command=train arch={arch} scale={} latent={} routing_iters={} epochs={} batch={} seed={} lr={} \
         g_loss={} feed={} data={} limit={} out={} ckpt_every={} sample_every={} record_time={}",
        model.scale.as_str(),
        model.latent,
        model.routing_iters,
        args.epochs,
        args.batch,
        args.seed,
        args.lr,
        train.g_loss,
        if args.experimental_generated_feed { "experimental_generated" } else { "real" },
        args.data.display(),
        args.limit.map_or("all".to_string(), |n| n.to_string()),
        args.out.display(),
        args.ckpt_every,
        args.sample_every,
        args.record_time,
    );
    let _ = writeln!(out, "seed: {}", args.seed);
    let dataset = limited(load_idx(&args.data, args.labels.as_deref())?, args.limit)?;
    let _ = writeln!(out, "data: {} images, mean pixel {:.4}", dataset.len(), dataset.mean_pixel());
    let opts = RunOptions {
        model,
        train,
        epochs: args.epochs,
        batch: args.batch,
        seed: args.seed,
        out: args.out,
        ckpt_every: args.ckpt_every,
        sample_every: args.sample_every,
        record_time: args.record_time,
    };
    let summary = train_run(&opts, &dataset, log)?;
    let _ = writeln!(out, "done: {} steps, final checkpoint {}", summary.steps, summary.final_checkpoint.display());
    Ok(())
}

/// Reference images for DigitCaps, demanded for the capsule-fed generator.
fn digitcaps_source(arch: ArchitectureId, data: Option<&std::path::Path>) -> Result<Option<Dataset>> {
    match (arch.needs_digitcaps(), data) {
        (true, None) => Err(Error::Usage(format!(
            "{arch} generates from DigitCaps of real images: --data <idx> is required"
        ))),
        (true, Some(p)) => Ok(Some(load_idx(p, None)?)),
        (false, _) => Ok(None),
    }
}

fn cmd_generate(args: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let (rows, cols) = args.grid;
    positive("n", args.n)?;
    if args.n > rows * cols {
        return Err(Error::Usage(format!("{} samples do not fit a {rows}x{cols} grid", args.n)));
    }
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.to_model()?;
    let _ = writeln!(
        out,
        "config: command=generate arch={} ckpt={} n={} grid={rows}x{cols} seed={} out={}",
        model.arch(),
        args.ckpt.display(),
        args.n,
        args.seed,
        args.out.display()
    );
    let _ = writeln!(out, "seed: {}", args.seed);
    let reference = digitcaps_source(model.arch(), args.data.as_deref())?;
    let images = sample_images(&model, args.n, args.seed, reference.as_ref())?;
    write_image_grid(&images, rows, cols, &args.out)?;
    Ok(())
}

fn cmd_score(args: ScoreArgs, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    positive("splits", args.splits)?;
    let scorer = Checkpoint::load(&args.scorer)?.to_scorer()?;
    let images = match (&args.ckpt, &args.images) {
        (Some(path), None) => {
            positive("n", args.n)?;
            let model = Checkpoint::load(path)?.to_model()?;
            let _ = writeln!(
                log,
                "config: command=score arch={} ckpt={} n={} splits={} seed={}",
                model.arch(),
                path.display(),
                args.n,
                args.splits,
                args.seed
            );
            let reference = digitcaps_source(model.arch(), args.data.as_deref())?;
            sample_images(&model, args.n, args.seed, reference.as_ref())?
        }
        (None, Some(path)) => {
            let _ = writeln!(log, "config: command=score images={} splits={}", path.display(), args.splits);
            load_idx(path, None)?.images().clone()
        }
        _ => return Err(Error::Usage("pass exactly one of --ckpt or --images".into())),
    };
    let n = images.shape()[0];
    if args.splits > n {
        return Err(Error::Usage(format!("--splits {} exceeds the {n} images", args.splits)));
    }
    let report = inception_score(&scorer.probabilities(&images)?, args.splits)?;
    let _ = write!(out, "{}", report_csv(&report));
    Ok(())
}

fn cmd_train_scorer(args: TrainScorerArgs, out: &mut dyn Write) -> Result<()> {
    let config = ScorerConfig {
        epochs: args.epochs,
        batch: args.batch,
        lr: args.lr,
        holdout: args.holdout,
        seed: args.seed,
        dataset: args.dataset.into(),
    };
    let _ = writeln!(
        out,
        "config: command=train-scorer data={} labels={} dataset={} epochs={} batch={} lr={} holdout={} seed={} out={}",
        args.data.display(),
        args.labels.display(),
        config.dataset,
        config.epochs,
        config.batch,
        config.lr,
        config.holdout,
        config.seed,
        args.out.display()
    );
    let _ = writeln!(out, "seed: {}", args.seed);
    let dataset = limited(load_idx(&args.data, Some(&args.labels))?, args.limit)?;
    let (scorer, report) = match Scorer::train(&dataset, &config) {
        Ok(r) => r,
        Err(e @ capsgan_core::Error::AccuracyFloor { achieved, .. }) => {
            let _ = writeln!(out, "held-out accuracy: {achieved:.4}");
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    Checkpoint::from_scorer(&scorer, config.dataset).save(&args.out)?;
    let _ = writeln!(out, "held-out accuracy: {:.4} on {} images", report.accuracy, report.holdout);
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            let _ = if code == 0 { write!(out, "{rendered}") } else { write!(err, "{rendered}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Score(a) => cmd_score(a, out, err),
        Command::TrainScorer(a) => cmd_train_scorer(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    let (stdout, stderr) = (io::stdout(), io::stderr());
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
