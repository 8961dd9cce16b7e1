use capsgan_core::gan::{generate, sample_latent, DigitCapsFeed, FeedSource, TrainConfig, Trainer};
use capsgan_core::loss::{GeneratorLoss, LOG_FLOOR};
use capsgan_core::networks::{ArchitectureId, Model, ModelConfig};
use capsgan_core::nn::ParamSet;
use capsgan_core::optim::AdamConfig;
use capsgan_core::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, 1, 28, 28], |_| rng.random_range(-1.0f32..1.0))
}

fn trainer(arch: ArchitectureId, config: TrainConfig) -> Trainer {
    let model = Model::build(ModelConfig::small(arch), 7).unwrap();
    Trainer::new(model, config, 8)
}

fn bytes(ps: &ParamSet) -> Vec<u32> {
    ps.named_tensors().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn training_is_deterministic() {
    for arch in ArchitectureId::ALL {
        let run = || {
            let mut t = trainer(arch, TrainConfig::default());
            let losses: Vec<_> = (0..3).map(|i| t.train_step(&batch(4, i)).unwrap()).collect();
            (losses, bytes(&t.model.disc.params), bytes(&t.model.gen.params))
        };
        assert_eq!(run(), run(), "{arch}");
    }
}

#[test]
fn losses_are_finite_and_bounded() {
    let cap = -2.0 * LOG_FLOOR.ln() + 1e-4;
    for arch in ArchitectureId::ALL {
        let mut t = trainer(arch, TrainConfig::default());
        for i in 0..3 {
            let l = t.train_step(&batch(4, i)).unwrap();
            for v in [l.d_loss, l.g_loss] {
                assert!(v.is_finite() && (0.0..=cap).contains(&v), "{arch}: {l:?}");
            }
            assert!(l.d_real_mean > 0.0 && l.d_real_mean < 1.0);
            assert!(l.d_fake_mean > 0.0 && l.d_fake_mean < 1.0);
        }
        assert_eq!(t.step(), 3);
    }
}

#[test]
fn minimax_generator_loss_is_non_positive() {
    let config = TrainConfig { g_loss: GeneratorLoss::Minimax, ..TrainConfig::default() };
    let mut t = trainer(ArchitectureId::Dcgan, config);
    let l = t.train_step(&batch(4, 0)).unwrap();
    assert!(l.g_loss <= 0.0);
}

#[test]
fn each_player_only_moves_its_own_parameters() {
    for arch in ArchitectureId::ALL {
        let mut t = trainer(arch, TrainConfig::default());
        let real = batch(4, 1);
        let (d0, g0) = (bytes(&t.model.disc.params), bytes(&t.model.gen.params));
        t.discriminator_step(&real).unwrap();
        let (d1, g1) = (bytes(&t.model.disc.params), bytes(&t.model.gen.params));
        assert_eq!(g0, g1, "{arch}: D step touched G");
        assert_ne!(d0, d1);
        t.generator_step(&real).unwrap();
        let (d2, g2) = (bytes(&t.model.disc.params), bytes(&t.model.gen.params));
        assert_eq!(d1, d2, "{arch}: G step touched D");
        assert_ne!(g1, g2);
    }
}

#[test]
fn tiny_learning_rate_does_not_increase_discriminator_loss() {
    let config = TrainConfig { adam: AdamConfig { lr: 1e-6, ..AdamConfig::default() }, ..TrainConfig::default() };
    let mut t = trainer(ArchitectureId::CapsGan1, config);
    let real = batch(6, 2);
    let z = sample_latent(&mut ChaCha8Rng::seed_from_u64(3), 6, t.model.gen.latent_len());
    let fake = generate(&t.model, &z, None, 6).unwrap();
    let before = t.discriminator_loss(&real, &fake).unwrap();
    t.discriminator_update(&real, &fake).unwrap();
    let after = t.discriminator_loss(&real, &fake).unwrap();
    assert!(after <= before, "{before} -> {after}");
}

#[test]
fn digitcaps_feed_uses_real_images_on_every_step() {
    let mut t = trainer(ArchitectureId::CapsGan2, TrainConfig::default());
    for i in 0..4 {
        assert_eq!(t.train_step(&batch(4, i)).unwrap().feed_source, FeedSource::RealImages);
    }
    let mut t = trainer(ArchitectureId::CapsGan1, TrainConfig::default());
    assert_eq!(t.train_step(&batch(4, 0)).unwrap().feed_source, FeedSource::None);
}

#[test]
fn generated_feed_needs_the_experimental_flag() {
    assert_eq!(TrainConfig::default().feed, DigitCapsFeed::RealImages);
    let config = TrainConfig { feed: DigitCapsFeed::ExperimentalGenerated, ..TrainConfig::default() };
    let mut t = trainer(ArchitectureId::CapsGan2, config);
    for i in 0..3 {
        assert_eq!(t.train_step(&batch(4, i)).unwrap().feed_source, FeedSource::GeneratedImages);
    }
}

#[test]
fn rng_state_round_trips() {
    let mut t = trainer(ArchitectureId::Dcgan, TrainConfig::default());
    t.train_step(&batch(4, 0)).unwrap();
    let state = t.rng_state();
    let mut a = state.restore();
    let b: f32 = t.rng_mut().random();
    assert_eq!(a.random::<f32>(), b);
}

#[test]
fn generation_needs_reference_images_for_capsgan2() {
    let t = trainer(ArchitectureId::CapsGan2, TrainConfig::default());
    let z = sample_latent(&mut ChaCha8Rng::seed_from_u64(1), 5, t.model.gen.latent_len());
    assert!(generate(&t.model, &z, None, 2).is_err());
    let imgs = generate(&t.model, &z, Some(&batch(5, 1)), 2).unwrap();
    assert_eq!(imgs.shape().dims(), &[5, 1, 28, 28]);
    assert_eq!(imgs.data(), generate(&t.model, &z, Some(&batch(5, 1)), 5).unwrap().data());
}

#[test]
fn rejects_malformed_batches() {
    let mut t = trainer(ArchitectureId::Dcgan, TrainConfig::default());
    assert!(t.train_step(&Tensor::zeros([4, 1, 27, 28])).is_err());
}
