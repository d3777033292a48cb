//! IDX files (the MNIST container): a big-endian magic word whose low byte is
//! the number of dimensions, one big-endian `u32` per dimension, then the
//! unsigned-byte payload. Gzip-wrapped files are detected by their header.

use std::io::Read;
use std::path::Path;

use super::{ImageDataset, Split};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a file, transparently inflating it when it starts with the gzip magic.
pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], magic: u32, dims: usize, what: &str) -> Result<Vec<usize>> {
    let need = 4 * (1 + dims);
    if bytes.len() < need {
        return Err(Error::Length(format!(
            "{what}: header needs {need} bytes, found {}",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let found = word(0);
    if found != magic {
        return Err(Error::Format(format!(
            "{what}: magic number {found:#010x}, expected {magic:#010x}"
        )));
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let expected = offset + len;
    if bytes.len() != expected {
        return Err(Error::Length(format!(
            "{what}: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    Ok(&bytes[offset..])
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let dims = header(bytes, IDX_IMAGES_MAGIC, 3, "idx images")?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let data = payload(bytes, 16, n * rows * cols, "idx images")?;
    Ok((n, rows, cols, data.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let dims = header(bytes, IDX_LABELS_MAGIC, 1, "idx labels")?;
    Ok(payload(bytes, 8, dims[0], "idx labels")?.to_vec())
}

/// Loads an images/labels pair. The returned split tag is `Train`; callers
/// that know better overwrite it.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let (n, rows, cols, images) =
        parse_idx_images(&read_maybe_gz(images_path)?).map_err(|e| with_path(e, images_path))?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?).map_err(|e| with_path(e, labels_path))?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{} holds {n} images but {} holds {} labels",
            images_path.display(),
            labels_path.display(),
            labels.len()
        )));
    }
    ImageDataset::new(images, labels, rows, cols, Split::Train)
}

fn with_path(e: Error, path: &Path) -> Error {
    let p = path.display();
    match e {
        Error::Format(m) => Error::Format(format!("{p}: {m}")),
        Error::Length(m) => Error::Length(format!("{p}: {m}")),
        other => other,
    }
}
