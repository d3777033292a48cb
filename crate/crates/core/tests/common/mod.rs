#![allow(dead_code)]

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn idx_images(images: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    for d in [n, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(images);
    out
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// 28×28 images whose class is a bright horizontal band at row `2·label`,
/// plus noise, so tiny networks can learn them.
pub fn synthetic_digits(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 10) as u8;
        labels.push(label);
        for r in 0..28 {
            for _ in 0..28 {
                let band = r / 2 == label as usize + 2;
                let base: u8 = if band { 200 } else { 0 };
                images.push(base.saturating_add(rng.gen_range(0..40)));
            }
        }
    }
    (images, labels)
}

/// Writes a synthetic MNIST-layout dataset under `<root>/mnist`.
pub fn write_synthetic_mnist(root: &Path, train: usize, test: usize) {
    let dir = root.join("mnist");
    fs::create_dir_all(&dir).unwrap();
    for (prefix, n, seed) in [("train", train, 1), ("t10k", test, 2)] {
        let (images, labels) = synthetic_digits(n, seed);
        fs::write(
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            idx_images(&images, n, 28, 28),
        )
        .unwrap();
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&labels)).unwrap();
    }
}

/// CIFAR-10 binary records: label byte then 1024 red, green, blue bytes.
pub fn cifar_records(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * 3073);
    for i in 0..n {
        out.push((i % 10) as u8);
        out.extend((0..3072).map(|_| rng.gen::<u8>()));
    }
    out
}
