//! Binary PGM (P5) sample grids.

use std::fs;
use std::path::Path;

use capsgan_core::data::{denormalize, PIXELS};
use capsgan_core::networks::IMAGE_SIZE;
use capsgan_core::Tensor;

use crate::error::{Error, Result};

/// Black gap between tiles, in pixels.
pub const SEPARATOR: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum PgmError {
    #[error("malformed PGM: {0}")]
    Malformed(String),

    #[error("{samples} samples do not fit a {rows}x{cols} grid")]
    GridTooSmall { samples: usize, rows: usize, cols: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses a P5 file with maxval 255; `#` comments are allowed in the header.
    pub fn parse(bytes: &[u8]) -> Result<Self, PgmError> {
        let bad = |m: &str| PgmError::Malformed(m.to_string());
        let mut pos = 0;
        let mut fields = [0usize; 3];
        let magic = next_token(bytes, &mut pos).ok_or_else(|| bad("missing magic"))?;
        if magic != b"P5" {
            return Err(bad("not a binary PGM"));
        }
        for field in &mut fields {
            let tok = next_token(bytes, &mut pos).ok_or_else(|| bad("short header"))?;
            *field = std::str::from_utf8(tok)
                .ok()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("non-numeric header field"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let raster = bytes.get(pos..).unwrap_or_default();
        if raster.len() != width * height {
            return Err(PgmError::Malformed(format!(
                "raster has {} bytes, header declares {width}x{height}",
                raster.len()
            )));
        }
        Ok(GrayImage { width, height, pixels: raster.to_vec() })
    }

    /// Pixels of tile `(row, col)` of a grid of 28x28 tiles.
    pub fn tile(&self, row: usize, col: usize) -> Vec<u8> {
        let step = IMAGE_SIZE + SEPARATOR;
        let (y0, x0) = (row * step, col * step);
        (0..IMAGE_SIZE)
            .flat_map(|y| self.pixels[(y0 + y) * self.width + x0..][..IMAGE_SIZE].iter().copied())
            .collect()
    }
}

fn next_token<'b>(bytes: &'b [u8], pos: &mut usize) -> Option<&'b [u8]> {
    loop {
        match bytes.get(*pos)? {
            b'#' => {
                while *bytes.get(*pos)? != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|c| !c.is_ascii_whitespace()) {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

/// Side length of `n` tiles laid out with separators.
pub fn grid_extent(n: usize) -> usize {
    n * IMAGE_SIZE + n.saturating_sub(1) * SEPARATOR
}

/// Tiles `samples[n x 1 x 28 x 28]` row-major into a `rows x cols` grid;
/// unused cells stay black.
pub fn image_grid(samples: &Tensor, rows: usize, cols: usize) -> Result<GrayImage> {
    let dims = samples.shape().dims();
    if dims.len() != 4 || dims[1..] != [1, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::Usage(format!("grid samples must be N x 1 x 28 x 28, got {}", samples.shape())));
    }
    let n = dims[0];
    if n > rows * cols {
        return Err(PgmError::GridTooSmall { samples: n, rows, cols }.into());
    }
    let (width, height) = (grid_extent(cols), grid_extent(rows));
    let mut pixels = vec![0u8; width * height];
    let step = IMAGE_SIZE + SEPARATOR;
    for (i, tile) in samples.data().chunks_exact(PIXELS).enumerate() {
        let (y0, x0) = ((i / cols) * step, (i % cols) * step);
        for (y, line) in tile.chunks_exact(IMAGE_SIZE).enumerate() {
            let dst = &mut pixels[(y0 + y) * width + x0..][..IMAGE_SIZE];
            for (d, &v) in dst.iter_mut().zip(line) {
                *d = denormalize(v);
            }
        }
    }
    Ok(GrayImage { width, height, pixels })
}

pub fn write_image_grid(samples: &Tensor, rows: usize, cols: usize, path: &Path) -> Result<()> {
    let image = image_grid(samples, rows, cols)?;
    fs::write(path, image.encode()).map_err(|e| Error::io(path, e))
}
