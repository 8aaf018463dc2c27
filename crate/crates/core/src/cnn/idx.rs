//! IDX image/label files (the MNIST container format).
//!
//! Header: big-endian `u32` magic (`0x00000803` images, `0x00000801`
//! labels), big-endian `u32` dimension sizes, then unsigned bytes.

use std::path::Path;

use super::{CnnError, Dataset, Shape, Tensor};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32, CnnError> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| CnnError::Format("truncated IDX header".into()))?;
        self.pos += 4;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn body(&self, len: usize) -> Result<&[u8], CnnError> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < len {
            return Err(CnnError::Format(format!(
                "IDX body has {} bytes, header promises {len}",
                rest.len()
            )));
        }
        Ok(&rest[..len])
    }
}

fn expect_magic(r: &mut Reader<'_>, expected: u32) -> Result<(), CnnError> {
    let found = r.u32()?;
    if found != expected {
        return Err(CnnError::BadMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>, CnnError> {
    let mut r = Reader { bytes, pos: 0 };
    expect_magic(&mut r, IMAGES_MAGIC)?;
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let per = rows * cols;
    let body = r.body(count * per)?;
    Ok(body
        .chunks_exact(per.max(1))
        .take(count)
        .map(|px| Tensor {
            shape: Shape::Chw(1, rows, cols),
            data: px.iter().map(|&p| p as f32 / 255.0).collect(),
        })
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, CnnError> {
    let mut r = Reader { bytes, pos: 0 };
    expect_magic(&mut r, LABELS_MAGIC)?;
    let count = r.u32()? as usize;
    Ok(r.body(count)?.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>, CnnError> {
    std::fs::read(path).map_err(|e| CnnError::io(path, e))
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Vec<Tensor>, CnnError> {
    parse_idx_images(&read(path.as_ref())?)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>, CnnError> {
    parse_idx_labels(&read(path.as_ref())?)
}

/// Loads an image/label pair; pixels are scaled by 1/255 into `[0, 1]`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset, CnnError> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(CnnError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    Ok(Dataset { images, labels })
}

/// Encodes `count` images of `rows x cols` raw bytes.
pub fn write_idx_images(rows: usize, cols: usize, pixels: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len() * rows * cols);
    for v in [IMAGES_MAGIC, pixels.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in pixels {
        assert_eq!(img.len(), rows * cols, "image size mismatch");
        out.extend_from_slice(img);
    }
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
