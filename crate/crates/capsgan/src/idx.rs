//! IDX reader and writer for 28x28 uint8 image files and uint8 label files.
//! Headers are a big-endian magic word followed by big-endian u32 dims.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use capsgan_core::data::{Dataset, PIXELS};
use capsgan_core::networks::IMAGE_SIZE;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("IDX file truncated: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("IDX file has {extra} bytes past the declared payload")]
    TrailingBytes { extra: usize },

    #[error("IDX images are {rows}x{cols}, expected 28x28")]
    Dimensions { rows: u32, cols: u32 },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("IDX file holds no images")]
    Empty,

    #[error("label {label} at index {index} is not a digit class")]
    InvalidLabel { index: usize, label: u8 },
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(IdxError::Truncated { needed: at + 4, found: bytes.len() })
}

fn check_payload(bytes: &[u8], header: usize, payload: usize) -> Result<(), IdxError> {
    let needed = header + payload;
    match bytes.len() {
        n if n < needed => Err(IdxError::Truncated { needed, found: n }),
        n if n > needed => Err(IdxError::TrailingBytes { extra: n - needed }),
        _ => Ok(()),
    }
}

/// Parses an image file, returning the image count and raw pixels.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, &[u8]), IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(IdxError::BadMagic { expected: IMAGES_MAGIC, found: magic });
    }
    let count = read_u32(bytes, 4)? as usize;
    let (rows, cols) = (read_u32(bytes, 8)?, read_u32(bytes, 12)?);
    if rows as usize != IMAGE_SIZE || cols as usize != IMAGE_SIZE {
        return Err(IdxError::Dimensions { rows, cols });
    }
    let payload = count.checked_mul(PIXELS).ok_or(IdxError::Truncated { needed: usize::MAX, found: bytes.len() })?;
    check_payload(bytes, 16, payload)?;
    Ok((count, &bytes[16..]))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8], IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::BadMagic { expected: LABELS_MAGIC, found: magic });
    }
    let count = read_u32(bytes, 4)? as usize;
    check_payload(bytes, 8, count)?;
    let labels = &bytes[8..];
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(IdxError::InvalidLabel { index, label });
    }
    Ok(labels)
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io { path: path.to_path_buf(), source })
}

/// Loads images (and optionally labels) into a normalized dataset.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> crate::Result<Dataset> {
    let image_bytes = read(images)?;
    let (count, pixels) = parse_images(&image_bytes)?;
    if count == 0 {
        return Err(IdxError::Empty.into());
    }
    let labels = match labels {
        Some(path) => {
            let label_bytes = read(path)?;
            let labels = parse_labels(&label_bytes)?;
            if labels.len() != count {
                return Err(IdxError::CountMismatch { images: count, labels: labels.len() }.into());
            }
            Some(labels.to_vec())
        }
        None => None,
    };
    Ok(Dataset::from_bytes(pixels, labels)?)
}

pub fn encode_images(pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len() % PIXELS, 0, "whole images only");
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGES_MAGIC, (pixels.len() / PIXELS) as u32, IMAGE_SIZE as u32, IMAGE_SIZE as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
