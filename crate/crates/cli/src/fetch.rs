//! Dataset download and local import into `<dir>/<dataset>/raw`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};
use sparsenet_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    Mnist,
    Cifar10,
    Cifar100,
}

impl Dataset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(Dataset::Mnist),
            "cifar10" => Ok(Dataset::Cifar10),
            "cifar100" => Ok(Dataset::Cifar100),
            other => Err(Error::config(format!("unknown dataset {other:?} (mnist, cifar10, cifar100)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Cifar10 => "cifar10",
            Dataset::Cifar100 => "cifar100",
        }
    }
}

/// Expected file and, where the content is fixed and well known, its SHA-256.
struct Expected {
    file: &'static str,
    sha256: Option<&'static str>,
    size: u64,
}

fn expected(ds: Dataset) -> Vec<Expected> {
    match ds {
        Dataset::Mnist => vec![
            Expected {
                file: "train-images-idx3-ubyte",
                sha256: Some("ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
                size: 47_040_016,
            },
            Expected {
                file: "train-labels-idx1-ubyte",
                sha256: Some("65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
                size: 60_008,
            },
            Expected {
                file: "t10k-images-idx3-ubyte",
                sha256: Some("0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
                size: 7_840_016,
            },
            Expected {
                file: "t10k-labels-idx1-ubyte",
                sha256: Some("ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
                size: 10_008,
            },
        ],
        Dataset::Cifar10 => {
            let mut v: Vec<Expected> = [
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ]
            .into_iter()
            .map(|file| Expected { file, sha256: None, size: 30_730_000 })
            .collect();
            v.push(Expected { file: "test_batch.bin", sha256: None, size: 30_730_000 });
            v
        }
        Dataset::Cifar100 => vec![
            Expected { file: "train.bin", sha256: None, size: 153_700_000 },
            Expected { file: "test.bin", sha256: None, size: 30_740_000 },
        ],
    }
}

pub fn default_mirrors(ds: Dataset) -> Vec<String> {
    match ds {
        Dataset::Mnist => vec![
            "https://ossci-datasets.s3.amazonaws.com/mnist/".into(),
            "https://storage.googleapis.com/cvdf-datasets/mnist/".into(),
            "http://yann.lecun.com/exdb/mnist/".into(),
        ],
        Dataset::Cifar10 => vec!["https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz".into()],
        Dataset::Cifar100 => vec!["https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz".into()],
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn raw_dir(root: &Path, ds: Dataset) -> PathBuf {
    root.join(ds.name()).join("raw")
}

/// Check every expected file; returns `(file, sha256)` pairs for the manifest.
pub fn verify(root: &Path, ds: Dataset) -> Result<Vec<(String, String)>> {
    let dir = raw_dir(root, ds);
    let mut out = Vec::new();
    for e in expected(ds) {
        let path = dir.join(e.file);
        let meta = fs::metadata(&path).map_err(|_| Error::data(format!("{} is missing", path.display())))?;
        if meta.len() != e.size {
            return Err(Error::data(format!("{} is {} bytes, expected {}", path.display(), meta.len(), e.size)));
        }
        let digest = sha256_file(&path)?;
        if let Some(want) = e.sha256 {
            if digest != want {
                return Err(Error::data(format!("{} checksum {digest} does not match {want}", path.display())));
            }
        }
        out.push((e.file.to_string(), digest));
    }
    Ok(out)
}

fn write_manifest(root: &Path, ds: Dataset, sums: &[(String, String)]) -> Result<PathBuf> {
    let path = root.join(ds.name()).join("checksums.json");
    let map: serde_json::Map<String, serde_json::Value> =
        sums.iter().map(|(f, s)| (f.clone(), serde_json::Value::String(s.clone()))).collect();
    fs::write(&path, serde_json::to_string_pretty(&map)?)?;
    Ok(path)
}

fn copy_maybe_gz(src: &Path, dst: &Path) -> Result<()> {
    let mut input = fs::File::open(src)?;
    let mut magic = [0u8; 2];
    let n = input.read(&mut magic)?;
    drop(input);
    let mut out = fs::File::create(dst)?;
    let input = fs::File::open(src)?;
    if n == 2 && magic == [0x1f, 0x8b] {
        std::io::copy(&mut GzDecoder::new(input), &mut out)?;
    } else {
        std::io::copy(&mut { input }, &mut out)?;
    }
    out.flush()?;
    Ok(())
}

/// Unpack the expected binaries from a `.tar.gz`, ignoring the archive's directory layout.
fn extract_tar_gz(reader: impl Read, ds: Dataset, dest: &Path) -> Result<usize> {
    let wanted: Vec<&str> = expected(ds).iter().map(|e| e.file).collect();
    let mut archive = tar::Archive::new(GzDecoder::new(reader));
    let mut found = 0;
    for entry in archive.entries()? {
        let mut entry = entry?;
        let name = entry
            .path()?
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if wanted.contains(&name.as_str()) {
            let mut out = fs::File::create(dest.join(&name))?;
            std::io::copy(&mut entry, &mut out)?;
            found += 1;
        }
    }
    Ok(found)
}

/// Import from a local directory (raw or `.gz` files) or a `.tar.gz` archive.
pub fn import(root: &Path, ds: Dataset, from: &Path) -> Result<()> {
    let dest = raw_dir(root, ds);
    fs::create_dir_all(&dest)?;
    if from.is_file() {
        let n = extract_tar_gz(fs::File::open(from)?, ds, &dest)?;
        if n == 0 {
            return Err(Error::data(format!("{} holds none of the expected files", from.display())));
        }
        return Ok(());
    }
    if !from.is_dir() {
        return Err(Error::data(format!("{} does not exist", from.display())));
    }
    for e in expected(ds) {
        let candidates = [from.join(e.file), from.join(format!("{}.gz", e.file))];
        let src = candidates
            .iter()
            .find(|p| p.is_file())
            .ok_or_else(|| Error::data(format!("{} not found in {}", e.file, from.display())))?;
        copy_maybe_gz(src, &dest.join(e.file))?;
    }
    Ok(())
}

fn download(url: &str) -> Result<Box<dyn Read + Send>> {
    let resp = ureq::get(url).call().map_err(|e| Error::data(format!("{url}: {e}")))?;
    Ok(Box::new(resp.into_body().into_reader()))
}

fn fetch_remote(root: &Path, ds: Dataset, mirrors: &[String]) -> Result<()> {
    let dest = raw_dir(root, ds);
    fs::create_dir_all(&dest)?;
    let mut failures = Vec::new();
    for mirror in mirrors {
        let attempt = (|| -> Result<()> {
            match ds {
                Dataset::Mnist => {
                    for e in expected(ds) {
                        let url = format!("{}{}.gz", mirror, e.file);
                        let mut body = GzDecoder::new(download(&url)?);
                        let mut out = fs::File::create(dest.join(e.file))?;
                        std::io::copy(&mut body, &mut out)?;
                    }
                    Ok(())
                }
                _ => extract_tar_gz(download(mirror)?, ds, &dest).map(|_| ()),
            }
        })();
        match attempt.and_then(|_| verify(root, ds).map(|_| ())) {
            Ok(()) => return Ok(()),
            Err(e) => failures.push(format!("{mirror}: {e}")),
        }
    }
    Err(Error::data(format!(
        "could not fetch {} from any mirror; use --from PATH with a local copy\n  {}",
        ds.name(),
        failures.join("\n  ")
    )))
}

/// Ensure `<root>/<dataset>/raw` holds verified files and write the checksum manifest.
pub fn fetch(root: &Path, ds: Dataset, from: Option<&Path>, mirrors: &[String]) -> Result<PathBuf> {
    if verify(root, ds).is_err() {
        match from {
            Some(src) => import(root, ds, src)?,
            None => fetch_remote(root, ds, mirrors)?,
        }
    }
    let sums = verify(root, ds)?;
    write_manifest(root, ds, &sums)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_files_fail_verification() {
        let dir = tempfile::tempdir().unwrap();
        assert!(verify(dir.path(), Dataset::Mnist).unwrap_err().is_data());
        assert!(Dataset::parse("svhn").unwrap_err().is_config());
    }

    #[test]
    fn cifar_tar_import_checks_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let archive = dir.path().join("c.tar.gz");
        {
            let gz = flate2::write::GzEncoder::new(fs::File::create(&archive).unwrap(), flate2::Compression::fast());
            let mut b = tar::Builder::new(gz);
            for (name, size) in [("cifar-100-binary/train.bin", 153_700_000usize), ("cifar-100-binary/test.bin", 3074)] {
                let data = vec![0u8; size];
                let mut h = tar::Header::new_gnu();
                h.set_size(size as u64);
                h.set_mode(0o644);
                h.set_cksum();
                b.append_data(&mut h, name, &data[..]).unwrap();
            }
            b.into_inner().unwrap().finish().unwrap();
        }
        let root = dir.path().join("cache");
        let err = fetch(&root, Dataset::Cifar100, Some(&archive), &[]).unwrap_err();
        assert!(err.to_string().contains("test.bin is 3074 bytes"), "{err}");
        assert!(raw_dir(&root, Dataset::Cifar100).join("train.bin").is_file());
    }
}
