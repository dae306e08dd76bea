mod common;

use advforge::models::{
    Architecture, Block, Checkpoint, CheckpointError, Classifier, Discriminator, DiscriminatorPart, ModelConfig,
    ModelError, CHECKPOINT_MAGIC,
};
use advforge::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn images(seed: u64, n: usize, [c, h, w]: [usize; 3]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn assert_close(a: &Tensor, reference: &[f64], tol: f64) {
    assert_eq!(a.numel(), reference.len());
    for (x, r) in a.data().iter().zip(reference) {
        assert!((*x as f64 - r).abs() <= tol * (1.0 + r.abs()), "{x} vs {r}");
    }
}

#[test]
fn lenet_logits_match_reference() {
    let m = Classifier::build(&ModelConfig::lenet(4)).unwrap();
    let x = images(1, 6, [1, 28, 28]);
    let reference = RefClassifier::of(&m).logits(&to_f64(&x), 6);
    assert_close(&m.forward(&x).unwrap(), &reference, 1e-5);
}

#[test]
fn small_cnn_logits_and_features_match_reference() {
    let m = Classifier::build(&ModelConfig::small_cnn([3, 16, 24], 5, [4, 6, 8], 2)).unwrap();
    let x = images(2, 3, [3, 16, 24]);
    let oracle = RefClassifier::of(&m);
    let (z, d) = oracle.features_with(&oracle.params, &to_f64(&x), 3);
    assert_eq!(d, m.feature_width());
    assert_eq!(d, 8 * 2 * 3);
    assert_close(&m.extract_features(&x).unwrap(), &z, 1e-5);
    assert_close(&m.forward(&x).unwrap(), &oracle.logits(&to_f64(&x), 3), 1e-5);
}

#[test]
fn discriminator_outputs_match_reference() {
    let d = Discriminator::build(84, 10, 3).unwrap();
    let z = images(3, 7, [1, 1, 84]).reshape(vec![7, 84]).unwrap();
    let (h, c) = d.forward(&z).unwrap();
    assert_eq!(h.shape(), &[7, 1]);
    assert_eq!(c.shape(), &[7, 10]);
    let oracle = RefDiscriminator::of(&d);
    let z64 = to_f64(&z);
    assert_close(&h, &oracle.domain_with(&oracle.params, &z64, 7), 1e-5);
    assert_close(&c, &oracle.class_with(&oracle.params, &z64, 7), 1e-5);
}

#[test]
fn lenet_feature_width_is_84() {
    let m = Classifier::build(&ModelConfig::lenet(0)).unwrap();
    assert_eq!(m.feature_width(), 84);
    assert_eq!(m.classes(), 10);
    assert_eq!(m.config().arch, Architecture::Lenet);
    // conv 6x1x5x5, conv 16x6x5x5, fc 400x120, fc 120x84, head 84x10
    let expected = (150 + 6) + (2400 + 16) + (48000 + 120) + (10080 + 84) + (840 + 10);
    assert_eq!(m.param_count(), expected);
}

#[test]
fn bad_configurations_are_rejected() {
    let mut cfg = ModelConfig::lenet(0);
    cfg.channels = vec![6];
    assert!(matches!(Classifier::build(&cfg), Err(ModelError::InvalidConfig(_))));
    let cfg = ModelConfig::small_cnn([1, 4, 4], 3, [2, 2, 2], 0);
    assert!(matches!(Classifier::build(&cfg), Err(ModelError::InvalidConfig(_))));
    let cfg = ModelConfig::small_cnn([1, 16, 16], 1, [2, 2, 2], 0);
    assert!(Classifier::build(&cfg).is_err());
    assert!("resnet".parse::<Architecture>().is_err());
}

#[test]
fn checkpoint_files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let m = Classifier::build(&ModelConfig::small_cnn([1, 16, 16], 4, [3, 5, 7], 11)).unwrap();
    let d = Discriminator::build(m.feature_width(), 4, 12).unwrap();
    let mp = dir.path().join("model.ckpt");
    let dp = dir.path().join("disc.ckpt");
    m.to_checkpoint().save(&mp).unwrap();
    d.to_checkpoint().save(&dp).unwrap();
    let raw = std::fs::read(&mp).unwrap();
    assert_eq!(raw[..4], CHECKPOINT_MAGIC);

    let m2 = Classifier::from_checkpoint(&Checkpoint::load(&mp).unwrap()).unwrap();
    let d2 = Discriminator::from_checkpoint(&Checkpoint::load(&dp).unwrap()).unwrap();
    assert_eq!(m2.config(), m.config());
    assert!(m.params().iter().zip(m2.params()).all(|(a, b)| a.bit_eq(b)));
    assert_eq!(d2, d);
    assert_eq!(m2.to_checkpoint().to_bytes(), raw);
    let x = images(5, 2, [1, 16, 16]);
    assert!(m.forward(&x).unwrap().bit_eq(&m2.forward(&x).unwrap()));
}

#[test]
fn loading_the_wrong_kind_of_checkpoint_fails() {
    let m = Classifier::build(&ModelConfig::lenet(0)).unwrap();
    let d = Discriminator::build(84, 10, 0).unwrap();
    assert!(Classifier::from_checkpoint(&d.to_checkpoint()).is_err());
    assert!(Discriminator::from_checkpoint(&m.to_checkpoint()).is_err());
    let missing = std::env::temp_dir().join("advforge-no-such-file.ckpt");
    assert!(matches!(Checkpoint::load(&missing), Err(CheckpointError::Io { .. })));
}

#[test]
fn discriminator_parts_partition_its_parameters() {
    let d = Discriminator::build(20, 6, 1).unwrap();
    let n = d.params().len();
    let mut covered = vec![0; n];
    for part in [DiscriminatorPart::Trunk, DiscriminatorPart::DomainHead, DiscriminatorPart::ClassHead] {
        for i in Discriminator::part_range(part) {
            covered[i] += 1;
        }
    }
    assert!(covered.iter().all(|&c| c == 1));
    let names = d.param_names();
    assert!(names[Discriminator::part_range(DiscriminatorPart::DomainHead)].iter().all(|s| s.starts_with("domain_head")));
    assert!(names[Discriminator::part_range(DiscriminatorPart::ClassHead)].iter().all(|s| s.starts_with("class_head")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn small_cnn_shapes_follow_configuration(
        n in 1usize..4,
        c in 1usize..4,
        h in 8usize..33,
        w in 8usize..33,
        classes in 2usize..12,
        seed in any::<u64>(),
    ) {
        let m = Classifier::build(&ModelConfig::small_cnn([c, h, w], classes, [2, 3, 4], seed)).unwrap();
        let x = images(seed, n, [c, h, w]);
        let y = m.forward(&x).unwrap();
        prop_assert_eq!(y.shape(), &[n, classes]);
        prop_assert!(y.is_finite());
        let z = m.extract_features(&x).unwrap();
        prop_assert_eq!(z.shape(), &[n, 4 * (h / 8) * (w / 8)]);
        prop_assert!(z.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn discriminator_parameter_count_is_closed_form(d in 1usize..64, classes in 2usize..16, seed in any::<u64>()) {
        let disc = Discriminator::build(d, classes, seed).unwrap();
        prop_assert_eq!(disc.param_count(), 3 * (d * d + d) + (d + 1) + (classes * d + classes));
    }

    #[test]
    fn initial_weights_respect_fan_in_bound(seed in any::<u64>()) {
        let m = Classifier::build(&ModelConfig::lenet(seed)).unwrap();
        for block in m.blocks() {
            let (w, b) = match block {
                Block::Conv(c) => (&c.weight, &c.bias),
                Block::Linear(l) => (&l.weight, &l.bias),
                _ => continue,
            };
            let fan_in: usize = match block {
                Block::Conv(_) => w.shape()[1..].iter().product(),
                _ => w.shape()[0],
            };
            let bound = (6.0 / fan_in as f32).sqrt();
            prop_assert!(w.data().iter().all(|v| v.abs() <= bound));
            prop_assert!(b.data().iter().all(|&v| v == 0.0));
        }
        let head = m.head();
        let bound = (6.0 / head.in_features() as f32).sqrt();
        prop_assert!(head.weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), classes in 2usize..6) {
        let m = Classifier::build(&ModelConfig::small_cnn([1, 8, 8], classes, [2, 2, 3], seed)).unwrap();
        let bytes = m.to_checkpoint().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let m2 = Classifier::from_checkpoint(&back).unwrap();
        prop_assert_eq!(m2.config(), m.config());
    }
}
