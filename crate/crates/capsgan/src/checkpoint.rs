//! The `CGANCKPT` container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "CGANCKPT" | version u32 | arch: u32 length + bytes
//! tensors section (f32) | optimizer section (f32) | state section (u64)
//! ```
//!
//! A section is an entry count (u64), then per entry the name (u32 length +
//! bytes), rank (u32) and dims (u64 each), then every payload in manifest
//! order.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use capsgan_core::gan::{DigitCapsFeed, RngState, TrainConfig, Trainer};
use capsgan_core::loss::GeneratorLoss;
use capsgan_core::networks::{ArchitectureId, Model, ModelConfig, Scale};
use capsgan_core::nn::ParamSet;
use capsgan_core::optim::{Adam, AdamConfig};
use capsgan_core::scorer::{Scorer, ScorerDataset};
use capsgan_core::Tensor;

pub const MAGIC: &[u8; 8] = b"CGANCKPT";
pub const VERSION: u32 = 1;
/// Architecture tag of a scorer checkpoint.
pub const SCORER_ARCH: &str = "scorer";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },

    #[error("checkpoint size mismatch: {0}")]
    Size(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type CkResult<T> = Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Vec<(String, Tensor)>,
    pub state: Vec<(String, Vec<u64>)>,
}

trait Payload: Sized + Copy {
    const WIDTH: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl Payload for f32 {
    const WIDTH: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Payload for u64 {
    const WIDTH: usize = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        u64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_section<'e, T: Payload + 'e>(out: &mut Vec<u8>, entries: impl Iterator<Item = (&'e str, &'e [usize], &'e [T])> + Clone) {
    out.extend_from_slice(&(entries.clone().count() as u64).to_le_bytes());
    for (name, dims, _) in entries.clone() {
        put_str(out, name);
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, _, data) in entries {
        for &v in data {
            v.put(out);
        }
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> CkResult<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Size(format!("need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> CkResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> CkResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> CkResult<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn section<T: Payload>(&mut self) -> CkResult<Vec<(String, Vec<usize>, Vec<T>)>> {
        let count = self.u64()?;
        let mut manifest = Vec::new();
        let mut seen = HashSet::new();
        let mut payload_bytes: usize = 0;
        for _ in 0..count {
            let name = self.str()?;
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::Malformed(format!("duplicate entry {name}")));
            }
            let rank = self.u32()? as usize;
            let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<CkResult<Vec<_>>>()?;
            let bytes = dims
                .iter()
                .try_fold(T::WIDTH, |acc, &d| acc.checked_mul(d))
                .and_then(|b| payload_bytes.checked_add(b))
                .ok_or_else(|| CheckpointError::Size(format!("entry {name} overflows")))?;
            payload_bytes = bytes;
            manifest.push((name, dims));
        }
        if payload_bytes > self.remaining() {
            return Err(CheckpointError::Size(format!(
                "manifest declares {payload_bytes} payload bytes, {} remain",
                self.remaining()
            )));
        }
        manifest
            .into_iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let data = self.take(n * T::WIDTH)?.chunks_exact(T::WIDTH).map(T::get).collect();
                Ok((name, dims, data))
            })
            .collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.arch);
        for group in [&self.tensors, &self.optimizer] {
            put_section(&mut out, group.iter().map(|(n, t)| (n.as_str(), t.shape().dims(), t.data())));
        }
        let lens: Vec<[usize; 1]> = self.state.iter().map(|(_, v)| [v.len()]).collect();
        put_section(
            &mut out,
            self.state.iter().zip(&lens).map(|((n, v), d)| (n.as_str(), d.as_slice(), v.as_slice())),
        );
        out
    }

    /// Parses a whole file; nothing is returned unless every section validates.
    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let arch = r.str()?;
        let to_tensors = |entries: Vec<(String, Vec<usize>, Vec<f32>)>| {
            entries
                .into_iter()
                .map(|(name, dims, data)| {
                    Tensor::new(dims, data)
                        .map(|t| (name, t))
                        .map_err(|e| CheckpointError::Malformed(e.to_string()))
                })
                .collect::<CkResult<Vec<_>>>()
        };
        let tensors = to_tensors(r.section::<f32>()?)?;
        let optimizer = to_tensors(r.section::<f32>()?)?;
        let mut state = Vec::new();
        for (name, dims, data) in r.section::<u64>()? {
            if dims.len() != 1 {
                return Err(CheckpointError::Malformed(format!("state entry {name} must be rank 1")));
            }
            state.push((name, data));
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Size(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { arch, tensors, optimizer, state })
    }

    pub fn save(&self, path: &Path) -> CkResult<()> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> CkResult<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn state_value(&self, name: &str) -> CkResult<&[u64]> {
        self.state
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| CheckpointError::Malformed(format!("missing state entry {name}")))
    }

    fn state_scalar(&self, name: &str) -> CkResult<u64> {
        match self.state_value(name)? {
            [v] => Ok(*v),
            other => Err(CheckpointError::Malformed(format!("state entry {name} has {} values", other.len()))),
        }
    }

    fn state_f32(&self, name: &str) -> CkResult<f32> {
        let bits = self.state_scalar(name)?;
        u32::try_from(bits)
            .map(f32::from_bits)
            .map_err(|_| CheckpointError::Malformed(format!("state entry {name} is not an f32")))
    }

    pub fn set_state(&mut self, name: &str, value: Vec<u64>) {
        match self.state.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = value,
            None => self.state.push((name.to_string(), value)),
        }
    }

    pub fn from_trainer(trainer: &Trainer) -> Self {
        let model = &trainer.model;
        let tensors = model
            .disc
            .params
            .named_tensors()
            .chain(model.gen.params.named_tensors())
            .map(|(n, t)| (n.to_string(), tensor_copy(t)))
            .collect();
        let mut optimizer = Vec::new();
        for (ps, opt) in [(&model.disc.params, &trainer.d_opt), (&model.gen.params, &trainer.g_opt)] {
            for (kind, moments) in [("m", opt.first_moments()), ("v", opt.second_moments())] {
                for ((name, t), m) in ps.params().zip(moments) {
                    let shaped = Tensor::new(t.shape().clone(), m.clone()).expect("moments match parameters");
                    optimizer.push((format!("adam.{kind}.{name}"), shaped));
                }
            }
        }
        let rng = trainer.rng_state();
        let config = &model.config;
        let train = &trainer.config;
        let f32_bits = |x: f32| vec![x.to_bits() as u64];
        let state = vec![
            ("train.step".into(), vec![trainer.step()]),
            ("d.adam.step".into(), vec![trainer.d_opt.step_count()]),
            ("g.adam.step".into(), vec![trainer.g_opt.step_count()]),
            (
                "rng.seed".into(),
                rng.seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            ),
            ("rng.stream".into(), vec![rng.stream]),
            ("rng.word_pos".into(), vec![rng.word_pos as u64, (rng.word_pos >> 64) as u64]),
            ("model.scale".into(), vec![(config.scale == Scale::Small) as u64]),
            ("model.routing_iters".into(), vec![config.routing_iters as u64]),
            ("model.latent".into(), vec![config.latent as u64]),
            ("train.g_loss".into(), vec![(train.g_loss == GeneratorLoss::Minimax) as u64]),
            ("train.feed".into(), vec![(train.feed == DigitCapsFeed::ExperimentalGenerated) as u64]),
            ("adam.lr".into(), f32_bits(train.adam.lr)),
            ("adam.beta1".into(), f32_bits(train.adam.beta1)),
            ("adam.beta2".into(), f32_bits(train.adam.beta2)),
            ("adam.eps".into(), f32_bits(train.adam.eps)),
        ];
        Checkpoint { arch: config.arch.as_str().to_string(), tensors, optimizer, state }
    }

    pub fn architecture(&self) -> CkResult<ArchitectureId> {
        self.arch.parse().map_err(|_| CheckpointError::Malformed(format!("unknown architecture {:?}", self.arch)))
    }

    pub fn model_config(&self) -> CkResult<ModelConfig> {
        let arch = self.architecture()?;
        let scale = if self.state_scalar("model.scale")? == 1 { Scale::Small } else { Scale::Full };
        let base = if scale == Scale::Small { ModelConfig::small(arch) } else { ModelConfig::new(arch) };
        Ok(ModelConfig {
            routing_iters: self.state_scalar("model.routing_iters")? as usize,
            latent: self.state_scalar("model.latent")? as usize,
            ..base
        })
    }

    /// Rebuilds the networks alone, for sampling.
    pub fn to_model(&self) -> CkResult<Model> {
        let mut model = Model::build(self.model_config()?, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut expected: Vec<String> = Vec::new();
        expected.extend(model.disc.params.named_tensors().map(|(n, _)| n.to_string()));
        expected.extend(model.gen.params.named_tensors().map(|(n, _)| n.to_string()));
        check_names(&self.tensors, &expected)?;
        for (name, t) in &self.tensors {
            let ps = if name.starts_with("d.") { &mut model.disc.params } else { &mut model.gen.params };
            ps.load(name, t).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn to_trainer(&self) -> CkResult<Trainer> {
        let model = self.to_model()?;
        let adam = AdamConfig {
            lr: self.state_f32("adam.lr")?,
            beta1: self.state_f32("adam.beta1")?,
            beta2: self.state_f32("adam.beta2")?,
            eps: self.state_f32("adam.eps")?,
        };
        let config = TrainConfig {
            adam,
            g_loss: if self.state_scalar("train.g_loss")? == 1 { GeneratorLoss::Minimax } else { GeneratorLoss::NonSaturating },
            feed: if self.state_scalar("train.feed")? == 1 {
                DigitCapsFeed::ExperimentalGenerated
            } else {
                DigitCapsFeed::RealImages
            },
        };
        let mut expected = Vec::new();
        for ps in [&model.disc.params, &model.gen.params] {
            for kind in ["m", "v"] {
                expected.extend(ps.params().map(|(n, _)| format!("adam.{kind}.{n}")));
            }
        }
        check_names(&self.optimizer, &expected)?;
        let opt = |ps: &ParamSet, prefix: &str| -> CkResult<Adam> {
            let moments = |kind: &str| {
                ps.params()
                    .map(|(n, _)| self.optimizer_entry(&format!("adam.{kind}.{n}")).map(|t| t.data().to_vec()))
                    .collect::<CkResult<Vec<_>>>()
            };
            let step = self.state_scalar(&format!("{prefix}.adam.step"))?;
            Adam::from_parts(adam, step, moments("m")?, moments("v")?, ps)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))
        };
        let d_opt = opt(&model.disc.params, "d")?;
        let g_opt = opt(&model.gen.params, "g")?;
        let seed_words = self.state_value("rng.seed")?;
        let pos = self.state_value("rng.word_pos")?;
        if seed_words.len() != 4 || pos.len() != 2 {
            return Err(CheckpointError::Malformed("rng state has the wrong length".into()));
        }
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(seed_words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let rng = RngState {
            seed,
            stream: self.state_scalar("rng.stream")?,
            word_pos: pos[0] as u128 | (pos[1] as u128) << 64,
        };
        let step = self.state_scalar("train.step")?;
        Ok(Trainer::from_parts(model, config, d_opt, g_opt, rng, step))
    }

    fn optimizer_entry(&self, name: &str) -> CkResult<&Tensor> {
        self.optimizer
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing optimizer entry {name}")))
    }

    pub fn from_scorer(scorer: &Scorer, dataset: ScorerDataset) -> Self {
        Checkpoint {
            arch: SCORER_ARCH.to_string(),
            tensors: scorer.params.named_tensors().map(|(n, t)| (n.to_string(), tensor_copy(t))).collect(),
            optimizer: Vec::new(),
            state: vec![("scorer.dataset".into(), vec![(dataset == ScorerDataset::Fashion) as u64])],
        }
    }

    pub fn to_scorer(&self) -> CkResult<Scorer> {
        if self.arch != SCORER_ARCH {
            return Err(CheckpointError::Malformed(format!("expected a scorer checkpoint, found {:?}", self.arch)));
        }
        let mut scorer = Scorer::new(0);
        let expected: Vec<String> = scorer.params.named_tensors().map(|(n, _)| n.to_string()).collect();
        check_names(&self.tensors, &expected)?;
        for (name, t) in &self.tensors {
            scorer.params.load(name, t).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
        Ok(scorer)
    }
}

/// Values only; gradients are never checkpointed.
fn tensor_copy(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().clone(), t.data().to_vec()).expect("same shape")
}

fn check_names(entries: &[(String, Tensor)], expected: &[String]) -> CkResult<()> {
    let have: HashSet<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
    let want: HashSet<&str> = expected.iter().map(String::as_str).collect();
    if let Some(missing) = want.difference(&have).next() {
        return Err(CheckpointError::Malformed(format!("missing entry {missing}")));
    }
    if let Some(extra) = have.difference(&want).next() {
        return Err(CheckpointError::Malformed(format!("unexpected entry {extra}")));
    }
    Ok(())
}
