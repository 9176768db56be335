//! MNIST in IDX format (big-endian, magic 2051 for images and 2049 for labels).

use std::path::{Path, PathBuf};

use super::{normalize_pair, LabeledSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::CorruptFile {
            path: path.to_string(),
            offset: offset as u64,
            msg: "truncated header".into(),
        })
}

/// Raw pixel bytes plus `(count, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(Vec<u8>, usize, usize, usize)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::CorruptFile {
            path: path.into(),
            offset: 0,
            msg: format!("image magic {magic}, expected {IMAGE_MAGIC}"),
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::CorruptFile {
            path: path.into(),
            offset: bytes.len().min(expected) as u64,
            msg: format!("file is {} bytes, header implies {expected}", bytes.len()),
        });
    }
    Ok((bytes[16..].to_vec(), count, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::CorruptFile {
            path: path.into(),
            offset: 0,
            msg: format!("label magic {magic}, expected {LABEL_MAGIC}"),
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::CorruptFile {
            path: path.into(),
            offset: bytes.len().min(8 + count) as u64,
            msg: format!("file is {} bytes, header implies {}", bytes.len(), 8 + count),
        });
    }
    if let Some(pos) = bytes[8..].iter().position(|&l| l > 9) {
        return Err(Error::CorruptFile {
            path: path.into(),
            offset: (8 + pos) as u64,
            msg: format!("label {} is not a digit", bytes[8 + pos]),
        });
    }
    Ok(bytes[8..].to_vec())
}

fn read_split(dir: &Path, images: &str, labels: &str) -> Result<LabeledSet> {
    let ipath = dir.join(images);
    let lpath = dir.join(labels);
    let ibytes = std::fs::read(&ipath).map_err(|e| Error::data(format!("{}: {e}", ipath.display())))?;
    let lbytes = std::fs::read(&lpath).map_err(|e| Error::data(format!("{}: {e}", lpath.display())))?;
    let (pixels, count, rows, cols) = parse_idx_images(&ibytes, &ipath.display().to_string())?;
    let labels = parse_idx_labels(&lbytes, &lpath.display().to_string())?;
    if labels.len() != count {
        return Err(Error::data(format!(
            "{} has {count} images but {} has {} labels",
            ipath.display(),
            lpath.display(),
            labels.len()
        )));
    }
    let inputs = Tensor::from_vec(
        vec![count, 1, rows, cols],
        pixels.into_iter().map(|p| p as f64 / 255.0).collect(),
    )?;
    LabeledSet::from_raw(inputs, labels.into_iter().map(usize::from).collect(), 10)
}

fn locate(dir: &Path) -> Option<PathBuf> {
    [dir.to_path_buf(), dir.join("mnist").join("raw"), dir.join("raw")]
        .into_iter()
        .find(|d| d.join("train-images-idx3-ubyte").is_file())
}

/// Load and standardize MNIST from `dir` (or `dir/mnist/raw`).
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(LabeledSet, LabeledSet)> {
    let dir = dir.as_ref();
    let root = locate(dir).ok_or_else(|| {
        Error::data(format!(
            "MNIST not found under {} (run `sparsenet data fetch --dataset mnist --dir {}`)",
            dir.display(),
            dir.display()
        ))
    })?;
    let train = read_split(&root, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = read_split(&root, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    normalize_pair(train, test)
}
