//! Import of raw grayscale images: one subdirectory per class, each file
//! exactly `height * width` unsigned bytes.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads `root/<class>/<file>`. Classes and files are taken in sorted name
/// order, so labels follow the alphabetical order of class directories.
pub fn import_raw_dir(root: impl AsRef<Path>, height: usize, width: usize) -> Result<Dataset> {
    let root = root.as_ref();
    if height == 0 || width == 0 {
        return Err(Error::Config("raw image height and width must be positive".into()));
    }
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no class directories", root.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} is empty", dir.display())));
        }
        for f in files {
            let bytes = fs::read(&f)?;
            if bytes.len() != height * width {
                return Err(Error::Data(format!(
                    "{}: {} bytes, expected {height}x{width} = {}",
                    f.display(),
                    bytes.len(),
                    height * width
                )));
            }
            let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
            images.push(Tensor::new(vec![height, width, 1], data)?);
            labels.push(label);
        }
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }
    Dataset::new(images, labels, Some(names))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imports_sorted_classes() {
        let dir = tempfile::tempdir().unwrap();
        for (class, files) in [("b", vec![[0u8, 255, 0, 255]]), ("a", vec![[255; 4], [0; 4]])] {
            let d = dir.path().join(class);
            fs::create_dir(&d).unwrap();
            for (i, bytes) in files.iter().enumerate() {
                fs::write(d.join(format!("{i}.raw")), bytes).unwrap();
            }
        }
        let ds = import_raw_dir(dir.path(), 2, 2).unwrap();
        assert_eq!(ds.labels, vec![0, 0, 1]);
        assert_eq!(ds.class_names.as_deref().unwrap(), ["a", "b"]);
        assert_eq!(ds.images[2].data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn wrong_size_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("x");
        fs::create_dir(&d).unwrap();
        fs::write(d.join("0.raw"), [1u8, 2, 3]).unwrap();
        assert!(matches!(import_raw_dir(dir.path(), 2, 2), Err(Error::Data(_))));
    }
}
