mod common;

use advforge::attacks::{
    bim, fgsm, pgd, run_attack, transfer_attack, AttackConfig, AttackError, AttackKind, LabelSource,
};
use advforge::data::{make_synthetic, ImageBatch, Split};
use advforge::models::{Classifier, ModelConfig};
use proptest::prelude::*;

use common::*;

fn model(seed: u64) -> Classifier {
    Classifier::build(&ModelConfig::small_cnn([1, 16, 16], 4, [4, 6, 8], seed)).unwrap()
}

fn batch(n: usize, seed: u64) -> ImageBatch {
    let ds = make_synthetic(n, 4, 16, seed, Split::Test).unwrap();
    ds.gather(&(0..n).collect::<Vec<_>>())
}

fn cfg(epsilon: f32, step: f32, iterations: usize, random_start: bool, seed: u64) -> AttackConfig {
    AttackConfig {
        epsilon,
        step,
        iterations,
        random_start,
        label_source: LabelSource::GroundTruth,
        seed,
    }
}

fn bits(t: &advforge::Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn clean_loss(m: &Classifier, b: &ImageBatch) -> f32 {
    m.input_gradient(b.images(), b.labels()).unwrap().1
}

#[test]
fn presets_use_standard_budgets() {
    let f = AttackConfig::mnist(AttackKind::Fgsm);
    assert_eq!((f.epsilon, f.step, f.iterations, f.random_start), (0.3, 0.3, 1, false));
    let p = AttackConfig::mnist(AttackKind::Pgd);
    assert_eq!((p.epsilon, p.step, p.iterations, p.random_start), (0.3, 0.01, 40, true));
    let b = AttackConfig::mnist(AttackKind::Bim);
    assert!(!b.random_start);
    let c = AttackConfig::cifar(AttackKind::Pgd);
    assert_eq!((c.epsilon, c.iterations), (0.031, 20));
    for k in AttackKind::ALL {
        assert_eq!(k.to_string().parse::<AttackKind>().unwrap(), k);
    }
}

#[test]
fn fgsm_equals_single_step_pgd_without_random_start() {
    let m = model(1);
    let b = batch(16, 1);
    let eps = 0.2;
    let a = fgsm(&m, &b, &cfg(eps, 0.0, 1, false, 0)).unwrap();
    let p = pgd(&m, &b, &cfg(eps, eps, 1, false, 0)).unwrap();
    assert_eq!(bits(&a.perturbed), bits(&p.perturbed));
}

#[test]
fn pgd_without_random_start_is_bim() {
    let m = model(2);
    let b = batch(12, 2);
    let c = cfg(0.25, 0.03, 12, false, 99);
    assert_eq!(bits(&pgd(&m, &b, &c).unwrap().perturbed), bits(&bim(&m, &b, &c).unwrap().perturbed));
}

#[test]
fn random_start_is_seeded() {
    let m = model(3);
    let b = batch(8, 3);
    let a = pgd(&m, &b, &cfg(0.3, 0.02, 3, true, 5)).unwrap();
    let again = pgd(&m, &b, &cfg(0.3, 0.02, 3, true, 5)).unwrap();
    let other = pgd(&m, &b, &cfg(0.3, 0.02, 3, true, 6)).unwrap();
    assert_eq!(bits(&a.perturbed), bits(&again.perturbed));
    assert_ne!(bits(&a.perturbed), bits(&other.perturbed));
}

#[test]
fn every_iterate_stays_in_the_budget() {
    let m = model(4);
    let b = batch(8, 4);
    let eps = 0.1;
    let x = b.images().data();
    for k in 1..=15 {
        // the k-step run reproduces the k-th iterate of any longer run
        let adv = pgd(&m, &b, &cfg(eps, 0.02, k, true, 7)).unwrap();
        for (a, o) in adv.perturbed.data().iter().zip(x) {
            assert!((a - o).abs() <= eps + 1e-6);
            assert!((0.0..=1.0).contains(a));
        }
    }
}

#[test]
fn zero_budget_returns_the_input() {
    let m = model(5);
    let b = batch(8, 5);
    for kind in AttackKind::ALL {
        let adv = run_attack(kind, &m, &b, &cfg(0.0, 0.05, 5, true, 1)).unwrap();
        assert_eq!(bits(&adv.perturbed), bits(b.images()), "{kind}");
        assert_eq!(adv.linf(), 0.0);
    }
}

#[test]
fn attacks_never_touch_parameters() {
    let m = model(6);
    let before = m.to_checkpoint().to_bytes();
    let b = batch(8, 6);
    for kind in AttackKind::ALL {
        run_attack(kind, &m, &b, &cfg(0.3, 0.05, 4, true, 2)).unwrap();
    }
    assert_eq!(m.to_checkpoint().to_bytes(), before);
    assert_eq!(m.gradient_queries(), 1 + 4 + 4);
}

#[test]
fn transfer_with_the_target_as_surrogate_is_white_box() {
    let m = model(7);
    let b = batch(8, 7);
    let c = cfg(0.2, 0.02, 5, true, 3);
    let t = transfer_attack(&m, &m, &b, AttackKind::Pgd, &c).unwrap();
    let w = pgd(&m, &b, &c).unwrap();
    assert_eq!(bits(&t.perturbed), bits(&w.perturbed));
}

#[test]
fn transfer_never_queries_the_target() {
    let surrogate = model(8);
    let target = model(9);
    let b = batch(8, 8);
    transfer_attack(&surrogate, &target, &b, AttackKind::Bim, &cfg(0.2, 0.02, 6, false, 0)).unwrap();
    assert_eq!(target.gradient_queries(), 0);
    assert_eq!(surrogate.gradient_queries(), 6);
    let other = Classifier::build(&ModelConfig::small_cnn([1, 16, 16], 5, [4, 6, 8], 0)).unwrap();
    let err = transfer_attack(&surrogate, &other, &b, AttackKind::Fgsm, &cfg(0.2, 0.2, 1, false, 0)).unwrap_err();
    assert!(matches!(err, AttackError::Incompatible(_)));
}

#[test]
fn model_predicted_labels_attack_the_prediction() {
    let m = model(10);
    let b = batch(12, 10);
    let predicted = ImageBatch::new(b.images().clone(), m.predict(b.images()).unwrap()).unwrap();
    let mut c = cfg(0.2, 0.03, 4, false, 0);
    let truth_on_pred = pgd(&m, &predicted, &c).unwrap();
    c.label_source = LabelSource::ModelPredicted;
    let self_labelled = pgd(&m, &b, &c).unwrap();
    assert_eq!(bits(&self_labelled.perturbed), bits(&truth_on_pred.perturbed));
}

#[test]
fn a_small_step_increases_the_loss() {
    let m = model(11);
    let b = batch(16, 11);
    let adv = fgsm(&m, &b, &cfg(1e-3, 0.0, 1, false, 0)).unwrap();
    assert!(clean_loss(&m, &adv.as_batch()) > clean_loss(&m, &b));
    let strong = pgd(&m, &b, &cfg(0.3, 0.05, 10, false, 0)).unwrap();
    assert!(clean_loss(&m, &strong.as_batch()) > clean_loss(&m, &adv.as_batch()));
}

#[test]
fn fgsm_direction_matches_reference_gradient_sign() {
    let m = model(12);
    let b = batch(4, 12);
    let eps = 0.05;
    let adv = fgsm(&m, &b, &cfg(eps, 0.0, 1, false, 0)).unwrap();
    let oracle = RefClassifier::of(&m);
    let x = vec![to_f64(b.images())];
    let labels = b.labels().to_vec();
    let mut compared = 0;
    for i in 0..x[0].len() {
        let Some(g) = central_difference(&x, 0, i, 1e-4, |p| cross_entropy(&oracle.logits(&p[0], 4), &labels, 4)) else {
            continue;
        };
        if g.abs() < 1e-5 {
            continue;
        }
        let moved = adv.perturbed.data()[i] - b.images().data()[i];
        let expected = (x[0][i] + eps as f64 * g.signum()).clamp(0.0, 1.0) - x[0][i];
        assert!((moved as f64 - expected).abs() < 1e-6, "pixel {i}: moved {moved}, gradient {g}");
        compared += 1;
    }
    assert!(compared > 100, "only {compared} pixels had a usable gradient");
}

#[test]
fn invalid_configurations_are_rejected() {
    let m = model(13);
    let b = batch(4, 13);
    for bad in [cfg(-0.1, 0.01, 5, false, 0), cfg(1.5, 0.01, 5, false, 0), cfg(0.3, 0.01, 0, false, 0), cfg(0.3, 0.0, 5, false, 0)] {
        assert!(matches!(pgd(&m, &b, &bad), Err(AttackError::InvalidConfig(_))));
    }
    assert!("cw".parse::<AttackKind>().is_err());
    assert!("oracle".parse::<LabelSource>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn perturbations_respect_budget_and_range(
        eps in 0.0f32..0.5,
        step in 0.001f32..0.2,
        iterations in 1usize..6,
        random_start in any::<bool>(),
        seed in any::<u64>(),
        kind in prop::sample::select(AttackKind::ALL.to_vec()),
    ) {
        let m = model(seed % 4);
        let b = batch(4, seed);
        let adv = run_attack(kind, &m, &b, &cfg(eps, step, iterations, random_start, seed)).unwrap();
        prop_assert_eq!(adv.perturbed.shape(), b.images().shape());
        prop_assert!(adv.linf() <= eps + 1e-6);
        prop_assert!(adv.perturbed.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(adv.originals.labels(), b.labels());
    }
}
