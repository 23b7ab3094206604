//! IDX containers: big-endian `u32` magic and dimensions followed by raw
//! unsigned bytes. Pixel bytes map to `[0, 1]` by dividing by 255.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses an image file and a label file already read into memory.
pub fn read_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let mut img = Reader {
        bytes: image_bytes,
        pos: 0,
    };
    let magic = img.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;

    let mut lab = Reader {
        bytes: label_bytes,
        pos: 0,
    };
    let magic = lab.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = lab.u32()? as usize;
    if label_count != count {
        return Err(Error::Data(format!(
            "{count} images but {label_count} labels"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("image size {rows}x{cols}")));
    }
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let px = img.take(rows * cols)?;
        let data = px.iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![rows, cols, 1], data)?);
    }
    let labels = lab.take(count)?.iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels, None)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    read_idx(&images, &labels)
}

/// Encodes a single-channel dataset with values in `[0, 1]`. Values are
/// rounded to the nearest multiple of 1/255.
pub fn write_idx(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols, c) = dataset.image_shape();
    if c != 1 {
        return Err(Error::Data(format!("IDX stores one channel, dataset has {c}")));
    }
    if dataset.num_classes() > 256 {
        return Err(Error::Data("IDX labels are single bytes (max 256 classes)".into()));
    }
    let mut img = Vec::with_capacity(16 + dataset.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, dataset.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for im in &dataset.images {
        for &v in im.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
            }
            img.push((v * 255.0).round() as u8);
        }
    }
    let mut lab = Vec::with_capacity(8 + dataset.len());
    for v in [IDX_LABELS_MAGIC, dataset.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(dataset.labels.iter().map(|&y| y as u8));
    Ok((img, lab))
}

pub fn write_idx_files(
    dataset: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (img, lab) = write_idx(dataset)?;
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}
