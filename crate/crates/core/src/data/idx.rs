//! Big-endian IDX files (the MNIST distribution format).

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::format(self.path, format!("truncated while reading {what}")))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < len {
            return Err(Error::format(
                self.path,
                format!("truncated payload: expected {len} bytes, found {rest}"),
            ));
        }
        if rest > len {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes after payload", rest - len),
            ));
        }
        let out = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        Ok(out)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let magic = self.u32("magic")?;
        if magic != expected {
            return Err(Error::format(
                self.path,
                format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
            ));
        }
        Ok(())
    }
}

/// Images as `[n, 1, h, w]` with pixel bytes scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(IDX_IMAGES_MAGIC)?;
    let n = r.u32("image count")? as usize;
    let h = r.u32("row count")? as usize;
    let w = r.u32("column count")? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(path, format!("empty image extents {n}x{h}x{w}")));
    }
    let pixels = r.payload(n * h * w)?;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(IDX_LABELS_MAGIC)?;
    let n = r.u32("label count")? as usize;
    Ok(r.payload(n)?.iter().map(|&b| usize::from(b)).collect())
}

/// Inverse of [`parse_idx_images`]: pixels are scaled by 255 and rounded.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Input(format!("IDX images must be [n, 1, h, w], got {s:?}")));
    }
    let mut out = Vec::with_capacity(16 + images.numel());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for &v in images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::Input(format!("label {l} does not fit in a byte")))?;
        out.push(b);
    }
    Ok(out)
}

/// Loads an image file and its label file into a dataset. The class count
/// is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let images = parse_idx_images(&read(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read(labels_path)?, labels_path)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Consistency(format!(
            "{} has {} images but {} has {} labels",
            images_path.display(),
            images.shape()[0],
            labels_path.display(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(images, labels, classes, split)
}
