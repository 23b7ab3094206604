//! Datasets, file formats, splits, episode sampling and checkpoints.

mod checkpoint;
mod features;
mod idx;
mod raw;
mod split;
mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use features::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC};
pub use idx::{load_idx, read_idx, write_idx, write_idx_files, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use raw::import_raw_dir;
pub use split::{sample_episode, split_classes, split_samples, ClassIndex};
pub use synthetic::{gen_synthetic_glyphs, GlyphConfig};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Labelled images of one shape. Labels are dense: every class in
/// `0..num_classes` has at least one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, class_names: Option<Vec<String>>) -> Result<Self> {
        let ds = Self {
            images,
            labels,
            class_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        let Some(first) = self.images.first() else {
            return Err(Error::Data("dataset is empty".into()));
        };
        if first.rank() != 3 {
            return dim_err(format!("images must be [h,w,c], got {:?}", first.shape()));
        }
        if let Some(bad) = self.images.iter().find(|im| im.shape() != first.shape()) {
            return dim_err(format!(
                "mixed image shapes {:?} and {:?}",
                first.shape(),
                bad.shape()
            ));
        }
        let c = self.num_classes();
        let mut seen = vec![false; c];
        self.labels.iter().for_each(|&y| seen[y] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!(
                "labels are not dense: class {missing} of 0..{c} has no samples"
            )));
        }
        if let Some(names) = &self.class_names {
            if names.len() != c {
                return Err(Error::Data(format!("{} class names for {c} classes", names.len())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// `(h, w, c)` of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images[0].shape();
        (s[0], s[1], s[2])
    }

    /// Sample indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Samples at `indices`, with labels passed through `relabel`.
    pub(crate) fn subset(&self, indices: &[usize], relabel: impl Fn(usize) -> usize) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| relabel(self.labels[i])).collect(),
            class_names: None,
        }
    }
}
