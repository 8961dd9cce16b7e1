use capsgan::checkpoint::{Checkpoint, CheckpointError, MAGIC, VERSION};
use capsgan_core::gan::{TrainConfig, Trainer};
use capsgan_core::networks::{ArchitectureId, Model, ModelConfig};
use capsgan_core::scorer::{Scorer, ScorerDataset};
use capsgan_core::Tensor;

fn batch(seed: usize) -> Tensor {
    Tensor::from_fn([4, 1, 28, 28], |i| (((i * 37 + seed * 11) % 200) as f32 / 100.0) - 1.0)
}

fn trained(arch: ArchitectureId, steps: usize) -> Trainer {
    let model = Model::build(ModelConfig::small(arch), 3).unwrap();
    let mut t = Trainer::new(model, TrainConfig::default(), 5);
    for s in 0..steps {
        t.train_step(&batch(s)).unwrap();
    }
    t
}

#[test]
fn save_load_resave_is_byte_identical_for_every_architecture() {
    let dir = tempfile::tempdir().unwrap();
    for arch in ArchitectureId::ALL {
        let ck = Checkpoint::from_trainer(&trained(arch, 2));
        let path = dir.path().join(arch.as_str());
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        let restored = loaded.to_trainer().unwrap();
        let again = Checkpoint::from_trainer(&restored).to_bytes();
        assert_eq!(again, std::fs::read(&path).unwrap(), "{arch}");
    }
}

#[test]
fn restored_trainer_continues_identically() {
    let mut uninterrupted = trained(ArchitectureId::CapsGan2, 2);
    let mut resumed = Checkpoint::from_bytes(&Checkpoint::from_trainer(&uninterrupted).to_bytes())
        .unwrap()
        .to_trainer()
        .unwrap();
    for s in 2..4 {
        let a = uninterrupted.train_step(&batch(s)).unwrap();
        let b = resumed.train_step(&batch(s)).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(
        Checkpoint::from_trainer(&uninterrupted).to_bytes(),
        Checkpoint::from_trainer(&resumed).to_bytes()
    );
}

#[test]
fn every_parameter_name_appears_exactly_once() {
    let t = trained(ArchitectureId::CapsGan3, 0);
    let ck = Checkpoint::from_trainer(&t);
    let mut names: Vec<&str> = ck.tensors.iter().map(|(n, _)| n.as_str()).collect();
    let total = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), total);
    let expected = t.model.disc.params.named_tensors().count() + t.model.gen.params.named_tensors().count();
    assert_eq!(total, expected);
}

#[test]
fn flipped_magic_byte_is_rejected() {
    let mut bytes = Checkpoint::from_trainer(&trained(ArchitectureId::Dcgan, 0)).to_bytes();
    bytes[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
}

#[test]
fn version_mismatch_is_rejected() {
    let mut bytes = Checkpoint::from_trainer(&trained(ArchitectureId::Dcgan, 0)).to_bytes();
    bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version { found: 2 })));
}

#[test]
fn truncation_and_trailing_bytes_are_size_errors() {
    let bytes = Checkpoint::from_trainer(&trained(ArchitectureId::Dcgan, 0)).to_bytes();
    for cut in [12, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Size(_))), "cut {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&longer), Err(CheckpointError::Size(_))));
}

#[test]
fn model_with_missing_tensor_is_rejected() {
    let mut ck = Checkpoint::from_trainer(&trained(ArchitectureId::Dcgan, 0));
    ck.tensors.pop();
    assert!(matches!(ck.to_model(), Err(CheckpointError::Malformed(_))));
}

/// Independent walk of the manifest: header bytes plus declared payload
/// bytes must account for the whole file.
#[test]
fn manifest_payload_accounts_for_file_length() {
    let bytes = Checkpoint::from_trainer(&trained(ArchitectureId::CapsGan1, 1)).to_bytes();
    let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as usize;
    let u64_at = |p: usize| u64::from_le_bytes(bytes[p..p + 8].try_into().unwrap()) as usize;
    assert_eq!(&bytes[..8], MAGIC);
    let mut pos = 12;
    pos += 4 + u32_at(pos);
    let mut header = pos;
    let mut payload = 0;
    for width in [4, 4, 8] {
        let manifest_start = pos;
        let count = u64_at(pos);
        pos += 8;
        let mut section = 0;
        for _ in 0..count {
            pos += 4 + u32_at(pos);
            let rank = u32_at(pos);
            pos += 4;
            let numel: usize = (0..rank).map(|d| u64_at(pos + 8 * d)).product();
            pos += 8 * rank;
            section += numel * width;
        }
        header += pos - manifest_start;
        payload += section;
        pos += section;
    }
    assert_eq!(pos, bytes.len());
    assert_eq!(payload, bytes.len() - header);
}

#[test]
fn scorer_round_trip() {
    let scorer = Scorer::new(9);
    let ck = Checkpoint::from_scorer(&scorer, ScorerDataset::Fashion);
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap().to_scorer().unwrap();
    assert_eq!(back.params, scorer.params);
    assert!(Checkpoint::from_trainer(&trained(ArchitectureId::Dcgan, 0)).to_scorer().is_err());
}
