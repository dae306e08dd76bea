mod common;

use std::collections::BTreeSet;
use std::path::Path;

use advforge::data::{
    dataset_from_idx, dataset_to_idx, encode_idx_images, encode_idx_labels, epoch_order, load_mnist_dir, make_synthetic,
    mnist_paths, parse_idx_images, parse_idx_labels, synthetic_square, DataError, IdxImages, Split, SYNTHETIC_NOISE,
};
use proptest::prelude::*;

use common::{mnist_available, mnist_dir};

fn idx_pair(count: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    let pixels = (0..count * rows * cols).map(|i| (i * 37 % 256) as u8).collect();
    let labels: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
    (encode_idx_images(&IdxImages { rows, cols, pixels }), encode_idx_labels(&labels))
}

#[test]
fn mnist_files_load_with_expected_sizes() {
    if !mnist_available() {
        eprintln!("skipping: MNIST not found in {}", mnist_dir().display());
        return;
    }
    let train = load_mnist_dir(&mnist_dir(), Split::Train).unwrap();
    let test = load_mnist_dir(&mnist_dir(), Split::Test).unwrap();
    assert_eq!(train.len(), 60_000);
    assert_eq!(test.len(), 10_000);
    assert_eq!(test.item_shape(), [1, 28, 28]);
    assert_eq!(test.classes(), 10);
    assert_eq!(test.id(), "mnist-test");
    // the first test digit is a 7
    assert_eq!(test.labels()[0], 7);
    let raw = std::fs::read(mnist_paths(&mnist_dir(), Split::Test).1).unwrap();
    assert_eq!(raw[8], 7);
    for split in [&train, &test] {
        let counts = (0..10).map(|c| split.labels().iter().filter(|&&l| l == c).count());
        assert!(counts.into_iter().all(|n| n > split.len() / 20));
    }
}

#[test]
fn idx_bytes_decode_to_scaled_pixels() {
    let (img, lab) = idx_pair(3, 4, 5);
    let images = parse_idx_images(&img, Path::new("img")).unwrap();
    let labels = parse_idx_labels(&lab, Path::new("lab")).unwrap();
    assert_eq!(images.count(), 3);
    let ds = dataset_from_idx(&images, &labels, Split::Train).unwrap();
    assert_eq!(ds.item_shape(), [1, 4, 5]);
    assert_eq!(ds.image(1)[0], images.pixels[20] as f32 / 255.0);
    assert_eq!(ds.labels(), &[0, 1, 2]);
    assert_eq!(dataset_to_idx(&ds), (img, lab));
}

#[test]
fn bad_magic_is_reported_with_path() {
    let (img, lab) = idx_pair(2, 3, 3);
    let err = parse_idx_images(&lab, Path::new("swapped")).unwrap_err();
    assert!(matches!(err, DataError::BadMagic { found: 0x801, .. }));
    assert!(err.to_string().contains("swapped"));
    assert!(matches!(parse_idx_labels(&img, Path::new("x")), Err(DataError::BadMagic { .. })));
}

#[test]
fn truncated_files_are_rejected() {
    let (img, lab) = idx_pair(4, 3, 3);
    for cut in [3, 15, img.len() - 1] {
        assert!(matches!(parse_idx_images(&img[..cut], Path::new("x")), Err(DataError::Truncated { .. })), "cut {cut}");
    }
    assert!(matches!(parse_idx_labels(&lab[..lab.len() - 1], Path::new("x")), Err(DataError::Truncated { .. })));
}

#[test]
fn count_mismatch_is_rejected() {
    let (img, _) = idx_pair(4, 3, 3);
    let images = parse_idx_images(&img, Path::new("x")).unwrap();
    let err = dataset_from_idx(&images, &[1, 2, 3], Split::Test).unwrap_err();
    assert!(matches!(err, DataError::CountMismatch { images: 4, labels: 3 }));
}

#[test]
fn missing_directory_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_mnist_dir(dir.path(), Split::Test).unwrap_err();
    assert!(matches!(err, DataError::Io { .. }));
    assert!(err.to_string().contains("t10k-images-idx3-ubyte"));
}

#[test]
fn synthetic_templates_are_recoverable() {
    let ds = make_synthetic(400, 4, 16, 9, Split::Test).unwrap();
    assert_eq!(ds.id(), "synthetic-test");
    for c in 0..4 {
        assert_eq!(ds.labels().iter().filter(|&&l| l == c).count(), 100);
    }
    let templates: Vec<Vec<f32>> = (0..4)
        .map(|c| {
            let (top, left, size) = synthetic_square(c, 4, 16);
            (0..256)
                .map(|p| {
                    let (y, x) = (p / 16, p % 16);
                    f32::from(u8::from((top..top + size).contains(&y) && (left..left + size).contains(&x)))
                })
                .collect()
        })
        .collect();
    for i in 0..ds.len() {
        let img = ds.image(i);
        let own = &templates[ds.labels()[i]];
        assert!(img.iter().zip(own).all(|(a, b)| (a - b).abs() <= SYNTHETIC_NOISE + 1e-6));
        let dist = |t: &Vec<f32>| img.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
        let nearest = (0..4).min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b]))).unwrap();
        assert_eq!(nearest, ds.labels()[i]);
    }
}

#[test]
fn synthetic_rejects_degenerate_requests() {
    assert!(make_synthetic(10, 1, 16, 0, Split::Train).is_err());
    assert!(make_synthetic(3, 4, 16, 0, Split::Train).is_err());
    assert!(make_synthetic(10, 4, 4, 0, Split::Train).is_err());
}

#[test]
fn batches_cover_the_epoch_with_a_short_tail() {
    let ds = make_synthetic(100, 4, 8, 1, Split::Train).unwrap();
    let batches: Vec<_> = ds.batches(64, 3).unwrap().collect();
    assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![64, 36]);
    let seen: BTreeSet<usize> = batches.iter().flat_map(|b| b.indices().to_vec()).collect();
    assert_eq!(seen.len(), 100);
    for b in &batches {
        assert_eq!(b.images().shape(), &[b.len(), 1, 8, 8]);
        for (j, &i) in b.indices().iter().enumerate() {
            assert_eq!(b.labels()[j], ds.labels()[i]);
            assert_eq!(&b.images().data()[j * 64..(j + 1) * 64], ds.image(i));
        }
    }
    assert!(matches!(ds.batches(0, 0), Err(DataError::InvalidBatchSize)));
    assert!(ds.take(101).is_err());
    assert_eq!(ds.take(10).unwrap().len(), 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn epoch_order_is_a_permutation(n in 0usize..500, seed in any::<u64>()) {
        let mut order = epoch_order(n, seed);
        prop_assert_eq!(order.clone(), epoch_order(n, seed));
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn different_seeds_give_different_orders(seed in any::<u64>()) {
        prop_assert_ne!(epoch_order(200, seed), epoch_order(200, seed.wrapping_add(1)));
    }

    #[test]
    fn idx_round_trips(count in 1usize..20, rows in 1usize..10, cols in 1usize..10, salt in any::<u8>()) {
        let pixels: Vec<u8> = (0..count * rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect();
        let labels: Vec<u8> = (0..count).map(|i| ((i + salt as usize) % 10) as u8).collect();
        let images = IdxImages { rows, cols, pixels };
        let (img, lab) = (encode_idx_images(&images), encode_idx_labels(&labels));
        prop_assert_eq!(&parse_idx_images(&img, Path::new("x")).unwrap(), &images);
        prop_assert_eq!(&parse_idx_labels(&lab, Path::new("x")).unwrap(), &labels);
        let ds = dataset_from_idx(&images, &labels, Split::Train).unwrap();
        prop_assert!(ds.image(0).iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(dataset_to_idx(&ds), (img, lab));
    }

    #[test]
    fn synthetic_is_seed_deterministic(seed in any::<u64>(), classes in 2usize..10) {
        let a = make_synthetic(classes * 3, classes, 12, seed, Split::Train).unwrap();
        let b = make_synthetic(classes * 3, classes, 12, seed, Split::Train).unwrap();
        prop_assert_eq!(&a, &b);
        let c = make_synthetic(classes * 3, classes, 12, seed ^ 1, Split::Train).unwrap();
        prop_assert_ne!(&a, &c);
    }
}
