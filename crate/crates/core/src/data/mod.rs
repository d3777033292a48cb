//! Image datasets, their on-disk formats, constant spike-train encoding and
//! seeded batch iteration.

mod batches;
mod cifar;
mod encode;
mod idx;

use std::path::{Path, PathBuf};

pub use batches::{batches, epoch_seed};
pub use cifar::{load_cifar10, parse_cifar10, to_gray};
pub use encode::{encode_constant, SpikeTrainBatch};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Grayscale images (`0..=255`) with labels in `0..10`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
    pub split: Split,
}

impl ImageDataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, rows: usize, cols: usize, split: Split) -> Result<Self> {
        let pixels = rows * cols;
        if pixels == 0 {
            return Err(Error::Format(format!("image extent {rows}x{cols} is empty")));
        }
        if images.len() != labels.len() * pixels {
            return Err(Error::Consistency(format!(
                "{} image bytes do not match {} labels of {rows}x{cols}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(ImageDataset {
            images,
            labels,
            rows,
            cols,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Flattened input dimensionality.
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.pixels();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> ImageDataset {
        let mut images = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        ImageDataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            rows: self.rows,
            cols: self.cols,
            split: self.split,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> ImageDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded split into `(train, validation)` holding out `fraction` of samples.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(ImageDataset, ImageDataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction {fraction} not in [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.len() as f64) * fraction).round() as usize;
        let (val_idx, train_idx) = order.split_at(held);
        let mut val = self.subset(val_idx);
        val.split = Split::Validation;
        let mut train = self.subset(train_idx);
        train.split = Split::Train;
        Ok((train, val))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion-mnist" | "fmnist" | "fashion_mnist" => Ok(DatasetKind::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected mnist, fashion-mnist or cifar10)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    pub fn input_dim(self) -> usize {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => 28 * 28,
            DatasetKind::Cifar10 => 32 * 32,
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
        }
    }
}

/// Picks `name.gz` when present, else `name`.
fn resolve(dir: &Path, name: &str) -> Result<PathBuf> {
    let gz = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    let raw = dir.join(name);
    if raw.is_file() {
        return Ok(raw);
    }
    Err(Error::io(
        raw,
        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found (also tried .gz)"),
    ))
}

/// Loads a standard split from `<data_dir>/<dataset>/` using the usual file names:
/// `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` for the MNIST family and
/// `data_batch_{1..5}.bin` / `test_batch.bin` for CIFAR-10.
pub fn load_dataset(kind: DatasetKind, data_dir: &Path, split: Split) -> Result<ImageDataset> {
    let dir = data_dir.join(kind.subdir());
    match kind {
        DatasetKind::Mnist | DatasetKind::FashionMnist => {
            let prefix = if split == Split::Test { "t10k" } else { "train" };
            let images = resolve(&dir, &format!("{prefix}-images-idx3-ubyte"))?;
            let labels = resolve(&dir, &format!("{prefix}-labels-idx1-ubyte"))?;
            let mut ds = load_idx(&images, &labels)?;
            ds.split = split;
            Ok(ds)
        }
        DatasetKind::Cifar10 => {
            let files: Vec<PathBuf> = if split == Split::Test {
                vec![resolve(&dir, "test_batch.bin")?]
            } else {
                (1..=5)
                    .map(|i| resolve(&dir, &format!("data_batch_{i}.bin")))
                    .collect::<Result<_>>()?
            };
            let mut ds = load_cifar10(&files)?;
            ds.split = split;
            Ok(ds)
        }
    }
}
