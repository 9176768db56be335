//! CIFAR-10 / CIFAR-100 binary format: fixed-size rows of label byte(s) then
//! 3072 pixel bytes (1024 red, 1024 green, 1024 blue).

use std::path::{Path, PathBuf};

use super::{normalize_pair, LabeledSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn from_classes(which: usize) -> Result<Self> {
        match which {
            10 => Ok(CifarVariant::Cifar10),
            100 => Ok(CifarVariant::Cifar100),
            other => Err(Error::config(format!("CIFAR variant must be 10 or 100, got {other}"))),
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn train_files(self) -> Vec<&'static str> {
        match self {
            CifarVariant::Cifar10 => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarVariant::Cifar100 => vec!["train.bin"],
        }
    }

    fn test_file(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "test_batch.bin",
            CifarVariant::Cifar100 => "test.bin",
        }
    }

    fn cache_names(self) -> (&'static str, &'static str) {
        match self {
            CifarVariant::Cifar10 => ("cifar10", "cifar-10-batches-bin"),
            CifarVariant::Cifar100 => ("cifar100", "cifar-100-binary"),
        }
    }
}

/// Parse one binary file into raw `[0,1]` pixels and labels (fine labels for CIFAR-100).
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, path: &str) -> Result<(Vec<f64>, Vec<usize>)> {
    let row = variant.label_bytes() + PIXELS;
    if bytes.len() % row != 0 {
        return Err(Error::CorruptFile {
            path: path.into(),
            offset: (bytes.len() - bytes.len() % row) as u64,
            msg: format!("{} bytes is not a whole number of {row}-byte rows", bytes.len()),
        });
    }
    let n = bytes.len() / row;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, chunk) in bytes.chunks(row).enumerate() {
        let label = chunk[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(Error::CorruptFile {
                path: path.into(),
                offset: (i * row + variant.label_bytes() - 1) as u64,
                msg: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        pixels.extend(chunk[variant.label_bytes()..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn locate(dir: &Path, variant: CifarVariant) -> Option<PathBuf> {
    let (cache, extracted) = variant.cache_names();
    [
        dir.to_path_buf(),
        dir.join(extracted),
        dir.join(cache).join("raw"),
        dir.join(cache).join("raw").join(extracted),
    ]
    .into_iter()
    .find(|d| d.join(variant.test_file()).is_file())
}

fn read_set(root: &Path, files: &[&str], variant: CifarVariant) -> Result<LabeledSet> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = root.join(f);
        let bytes = std::fs::read(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let (p, l) = parse_cifar(&bytes, variant, &path.display().to_string())?;
        pixels.extend(p);
        labels.extend(l);
    }
    let inputs = Tensor::from_vec(vec![labels.len(), 3, 32, 32], pixels)?;
    LabeledSet::from_raw(inputs, labels, variant.classes())
}

/// Load and standardize CIFAR-10 (`which = 10`) or CIFAR-100 (`which = 100`).
pub fn load_cifar(dir: impl AsRef<Path>, which: usize) -> Result<(LabeledSet, LabeledSet)> {
    let variant = CifarVariant::from_classes(which)?;
    let dir = dir.as_ref();
    let root = locate(dir, variant).ok_or_else(|| {
        Error::data(format!(
            "CIFAR-{which} not found under {} (run `sparsenet data fetch --dataset cifar{which} --dir {}`)",
            dir.display(),
            dir.display()
        ))
    })?;
    let train = read_set(&root, &variant.train_files(), variant)?;
    let test = read_set(&root, &[variant.test_file()], variant)?;
    normalize_pair(train, test)
}
