//! CIFAR-10 binary batches: records of one label byte followed by the red,
//! green and blue 32×32 planes. Images are reduced to grayscale on load.

use std::path::PathBuf;

use super::idx::read_maybe_gz;
use super::{ImageDataset, Split};
use crate::error::{Error, Result};

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + 3 * PLANE;

/// ITU-R BT.601 luma `0.299R + 0.587G + 0.114B`, rounded half up. Integer
/// arithmetic keeps ties exact.
pub fn to_gray(r: u8, g: u8, b: u8) -> u8 {
    let y = 299 * u32::from(r) + 587 * u32::from(g) + 114 * u32::from(b);
    ((y + 500) / 1000) as u8
}

/// Returns `(grayscale pixels, labels)` for one batch file's bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut gray = Vec::with_capacity(n * PLANE);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        labels.push(rec[0]);
        let (r, rest) = rec[1..].split_at(PLANE);
        let (g, b) = rest.split_at(PLANE);
        gray.extend((0..PLANE).map(|i| to_gray(r[i], g[i], b[i])));
    }
    Ok((gray, labels))
}

pub fn load_cifar10(batch_files: &[PathBuf]) -> Result<ImageDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in batch_files {
        let (g, l) =
            parse_cifar10(&read_maybe_gz(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        images.extend(g);
        labels.extend(l);
    }
    ImageDataset::new(images, labels, SIDE, SIDE, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luminance_reference_points() {
        assert_eq!(to_gray(255, 255, 255), 255);
        assert_eq!(to_gray(0, 0, 0), 0);
        assert_eq!(to_gray(255, 0, 0), 76);
        assert_eq!(to_gray(0, 255, 0), 150);
        assert_eq!(to_gray(0, 0, 255), 29);
    }

    #[test]
    fn gray_is_idempotent_on_gray_pixels() {
        for v in 0..=255u8 {
            assert_eq!(to_gray(v, v, v), v);
        }
    }

    #[test]
    fn ragged_file_is_rejected() {
        assert!(matches!(
            parse_cifar10(&vec![0; RECORD_BYTES + 1]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn planes_are_read_in_rgb_order() {
        let mut rec = vec![0u8; RECORD_BYTES];
        rec[0] = 3;
        rec[1] = 255; // red plane, pixel 0
        rec[1 + PLANE + 1] = 255; // green plane, pixel 1
        let (gray, labels) = parse_cifar10(&rec).unwrap();
        assert_eq!(labels, vec![3]);
        assert_eq!(&gray[..3], &[76, 150, 0]);
    }
}
