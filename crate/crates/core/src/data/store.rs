//! Dataset directories: `train.jsonl`, `val.jsonl`, `ood.jsonl` and a
//! `manifest.json` recording the generator settings, line counts and
//! checksums of each file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FeatureMatrix, GeneratorConfig, MultitaskDataset, SyntheticGenerator};
use crate::error::{Error, Result};

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const OOD_FILE: &str = "ood.jsonl";
const FILES: [&str; 3] = ["train.jsonl", "val.jsonl", OOD_FILE];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub path: String,
    pub lines: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub generator: GeneratorConfig,
    /// SHA-256 of the generator settings and seed.
    pub generator_checksum: String,
    pub dim: usize,
    pub files: Vec<DatasetFile>,
}

pub fn generator_checksum(config: &GeneratorConfig, seed: u64) -> Result<String> {
    let text = serde_json::to_vec(&(config, seed))?;
    Ok(hex::encode(Sha256::digest(text)))
}

fn describe(dir: &Path, name: &str) -> Result<DatasetFile> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(DatasetFile {
        path: name.to_string(),
        lines: bytes.iter().filter(|&&b| b == b'\n').count(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Generates the in-domain dataset and OOD features and writes them to `dir`.
pub fn write_dataset_dir(config: &GeneratorConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let generator = SyntheticGenerator::new(config, seed)?;
    let dataset = generator.generate()?;
    dataset.write_jsonl(dir)?;
    generator.generate_ood().write_jsonl(&dir.join(OOD_FILE))?;
    let manifest = DatasetManifest {
        seed,
        generator: config.clone(),
        generator_checksum: generator_checksum(config, seed)?,
        dim: dataset.dim,
        files: FILES.iter().map(|f| describe(dir, f)).collect::<Result<_>>()?,
    };
    let path = dir.join(DATASET_MANIFEST);
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a dataset directory, verifying every file against the manifest.
pub fn load_dataset_dir(dir: &Path) -> Result<(MultitaskDataset, FeatureMatrix, DatasetManifest)> {
    let path = dir.join(DATASET_MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for expected in &manifest.files {
        let found = describe(dir, &expected.path)?;
        if found.sha256 != expected.sha256 {
            return Err(Error::Checksum {
                expected: expected.sha256.clone(),
                found: found.sha256,
            });
        }
    }
    let dataset = MultitaskDataset::read_jsonl(dir)?;
    if dataset.dim != manifest.dim {
        return Err(Error::invalid(format!(
            "{}: manifest says {} features, files have {}",
            dir.display(),
            manifest.dim,
            dataset.dim
        )));
    }
    let ood = FeatureMatrix::read_jsonl(&dir.join(OOD_FILE), dataset.dim)?;
    Ok((dataset, ood, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig::small(150);
        let m = write_dataset_dir(&cfg, 4, dir.path()).unwrap();
        let (ds, ood, back) = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.files[0].lines + m.files[1].lines, ds.instances.len());
        assert_eq!(m.files[2].lines, ood.len());
        assert_eq!(ds, crate::data::generate_dataset(&cfg, 4).unwrap());
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = GeneratorConfig::small(90);
        write_dataset_dir(&cfg, 9, a.path()).unwrap();
        write_dataset_dir(&cfg, 9, b.path()).unwrap();
        for f in FILES.iter().chain([&DATASET_MANIFEST]) {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(&GeneratorConfig::small(90), 1, dir.path()).unwrap();
        let path = dir.path().join("val.jsonl");
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset_dir(dir.path()), Err(Error::Checksum { .. })));
    }
}
