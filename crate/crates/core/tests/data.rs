use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strip_mlp::data::{
    augment, batch_iter, flip_horizontal, load_cifar10_bin, parse_cifar10, shift_crop, synthetic_dataset,
    to_cifar10_bytes, write_cifar10_bin, AugmentPolicy, BatchIter, Dataset, Normalization, CIFAR_PIXELS, CIFAR_RECORD,
};
use strip_mlp::Error;

fn records(labels: &[u8], seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &l in labels {
        out.push(l);
        out.extend((0..CIFAR_PIXELS).map(|_| rng.gen::<u8>()));
    }
    out
}

#[test]
fn two_record_file_round_trip() {
    let bytes = records(&[3, 7], 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    std::fs::write(&path, &bytes).unwrap();
    let norm = Normalization::default();
    let ds = load_cifar10_bin(&[&path], &norm).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.labels, vec![3, 7]);
    assert_eq!(to_cifar10_bytes(&ds, &norm).unwrap(), bytes);

    let again = dir.path().join("again.bin");
    write_cifar10_bin(&again, &ds, &norm).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
}

#[test]
fn multiple_files_concatenate() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    std::fs::write(&a, records(&[1], 2)).unwrap();
    std::fs::write(&b, records(&[2, 9], 3)).unwrap();
    let ds = load_cifar10_bin(&[a, b], &Normalization::identity()).unwrap();
    assert_eq!(ds.labels, vec![1, 2, 9]);
    assert_eq!(ds.images.len(), 3 * CIFAR_PIXELS);
}

#[test]
fn zero_pixels_normalize_per_channel() {
    let mut bytes = vec![0u8; CIFAR_RECORD];
    bytes[0] = 4;
    let norm = Normalization::default();
    let ds = parse_cifar10(&bytes, "zero", &norm).unwrap();
    for c in 0..3 {
        let want = (0.0 - norm.mean[c]) / norm.std[c];
        assert!(ds.image(0)[c * 1024..(c + 1) * 1024].iter().all(|&v| v == want));
    }
}

#[test]
fn framing_errors() {
    match parse_cifar10(&[0u8; 3072], "short.bin", &Normalization::default()) {
        Err(Error::Ingestion { offset, path, .. }) => {
            assert_eq!(offset, 0);
            assert_eq!(path.to_str(), Some("short.bin"));
        }
        other => panic!("expected an ingestion error, got {other:?}"),
    }
    let mut bytes = records(&[1, 2], 4);
    bytes.truncate(CIFAR_RECORD + 100);
    assert!(matches!(
        parse_cifar10(&bytes, "cut", &Normalization::default()),
        Err(Error::Ingestion { offset, .. }) if offset == CIFAR_RECORD as u64
    ));
    let bad = records(&[10], 5);
    assert!(matches!(parse_cifar10(&bad, "bad", &Normalization::default()), Err(Error::Data(_))));
}

#[test]
fn normalization_inverts() {
    let norm = Normalization::default();
    for c in 0..3 {
        for p in 0..=255u8 {
            let v = p as f64 / 255.0;
            assert!((norm.denormalize(c, norm.normalize(c, v)) - v).abs() <= 1e-12);
        }
    }
    assert!(Normalization { std: [1.0, 0.0, 1.0], ..norm }.validate().is_err());
}

#[test]
fn synthetic_is_deterministic_and_balanced() {
    let a = synthetic_dataset(64, 8, 16, 9).unwrap();
    let b = synthetic_dataset(64, 8, 16, 9).unwrap();
    let c = synthetic_dataset(64, 8, 16, 10).unwrap();
    assert_eq!(a, b);
    assert!(a.images.iter().zip(&b.images).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(a.images, c.images);
    for k in 0..8 {
        assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 8);
    }
    assert!(synthetic_dataset(4, 8, 16, 0).is_err());
}

#[test]
fn synthetic_class_means_are_distinct() {
    let ds = synthetic_dataset(64, 8, 8, 11).unwrap();
    let len = ds.image_len();
    let mut means = vec![vec![0.0; len]; 8];
    for i in 0..ds.len() {
        for (m, v) in means[ds.labels[i]].iter_mut().zip(ds.image(i)) {
            *m += v / 8.0;
        }
    }
    for a in 0..8 {
        for b in a + 1..8 {
            let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d > 0.0);
        }
    }
}

#[test]
fn synthetic_set_survives_the_binary_layout() {
    let norm = Normalization::identity();
    let mut ds = synthetic_dataset(10, 10, 32, 12).unwrap();
    for v in &mut ds.images {
        *v = ((v.clamp(-2.0, 2.0) + 2.0) / 4.0 * 255.0).round() / 255.0;
    }
    let bytes = to_cifar10_bytes(&ds, &norm).unwrap();
    let back = parse_cifar10(&bytes, "synthetic", &norm).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert!(back.images.iter().zip(&ds.images).all(|(a, b)| (a - b).abs() <= 1e-12));
}

#[test]
fn augmentation_contracts() {
    let ds = synthetic_dataset(8, 8, 8, 13).unwrap();
    let img = ds.image(3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let same = augment(img, 8, &mut rng, AugmentPolicy::None);
    assert!(same.iter().zip(img).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(flip_horizontal(&flip_horizontal(img, 8), 8), img);
    assert_eq!(shift_crop(img, 8, 0, 0), img);
    for _ in 0..20 {
        assert_eq!(augment(img, 8, &mut rng, AugmentPolicy::Basic).len(), img.len());
    }
    let shifted = shift_crop(img, 8, 1, 0);
    assert_eq!(&shifted[..7 * 8], &img[8..8 * 8]);
    assert!(shifted[7 * 8..8 * 8].iter().all(|&v| v == 0.0));
}

fn toy(n: usize) -> Dataset {
    Dataset::new((0..n).map(|i| i as f64).collect(), (0..n).map(|i| i % 3).collect(), 1, 1, 3).unwrap()
}

#[test]
fn batches_partition_the_dataset() {
    let ds = toy(10);
    let sizes: Vec<usize> = batch_iter(&ds, 4, 5, 0).unwrap().map(|b| b.labels.len()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
    let seen: Vec<usize> = batch_iter(&ds, 4, 5, 0)
        .unwrap()
        .flat_map(|b| b.images.data().iter().map(|&v| v as usize).collect::<Vec<_>>())
        .collect();
    assert_eq!(seen.len(), 10);
    assert_eq!(seen.iter().copied().collect::<BTreeSet<_>>(), (0..10).collect());
}

#[test]
fn batch_order_is_seeded() {
    let ds = toy(50);
    let order = |seed, epoch| BatchIter::new(&ds, 7, seed, epoch, AugmentPolicy::None).unwrap().order().to_vec();
    assert_eq!(order(1, 0), order(1, 0));
    assert_ne!(order(1, 0), order(1, 1));
    assert_ne!(order(1, 0), order(2, 0));
    assert_eq!(BatchIter::sequential(&ds, 7).unwrap().order(), (0..50).collect::<Vec<_>>());
    assert!(BatchIter::new(&ds, 0, 0, 0, AugmentPolicy::None).is_err());
}

#[test]
fn dataset_rejects_bad_labels_and_sizes() {
    assert!(matches!(Dataset::new(vec![0.0; 2], vec![0, 3], 1, 1, 3), Err(Error::Data(_))));
    assert!(matches!(Dataset::new(vec![0.0; 3], vec![0, 1], 1, 1, 3), Err(Error::Dimension(_))));
}
