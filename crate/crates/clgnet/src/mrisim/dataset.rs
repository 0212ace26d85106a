//! On-disk dataset layout.
//!
//! `<root>/manifest.json` records the generation parameters;
//! `<root>/pairs/{train,val}/{index}.clgt` holds one sample each: a small
//! JSON manifest (entry names/offsets plus mask metadata), then the gt,
//! input, and mask tensors concatenated in the binary tensor format.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrisim::{cartesian_mask, make_pair, phantom, SamplePair, SamplingMask};
use crate::rng::mix;
use crate::tensor::{read_tensor, write_tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Generation parameters recorded at the dataset root.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub height: usize,
    pub width: usize,
    pub acceleration: u32,
    pub center_fraction: f64,
    pub seed: u64,
    pub count: usize,
    pub train_count: usize,
}

#[derive(Serialize, Deserialize)]
struct PairHeader {
    entries: Vec<PairEntry>,
    mask: MaskMeta,
}

#[derive(Serialize, Deserialize)]
struct PairEntry {
    name: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct MaskMeta {
    acceleration: u32,
    center_fraction: f64,
    seed: u64,
}

pub fn save_pair(path: &Path, pair: &SamplePair) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in
        [("gt", &pair.gt), ("input", &pair.input), ("mask", &pair.mask.to_tensor())]
    {
        entries.push(PairEntry { name: name.to_string(), offset: blob.len() as u64 });
        write_tensor(&mut blob, t)?;
    }
    let header = PairHeader {
        entries,
        mask: MaskMeta {
            acceleration: pair.mask.acceleration,
            center_fraction: pair.mask.center_fraction,
            seed: pair.mask.seed,
        },
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn load_pair(path: &Path) -> Result<SamplePair> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::integrity(format!("{}: truncated pair file", path.display())));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::integrity(format!("{}: truncated pair header", path.display())));
    }
    let header: PairHeader = serde_json::from_slice(&bytes[8..8 + header_len])?;
    let blob = &bytes[8 + header_len..];
    let tensor_at = |name: &str| -> Result<crate::tensor::Tensor> {
        let entry = header
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::integrity(format!("pair file missing `{name}` entry")))?;
        read_tensor(&mut &blob[entry.offset as usize..])
    };
    let gt = tensor_at("gt")?;
    let input = tensor_at("input")?;
    let mask_t = tensor_at("mask")?;
    let mask = SamplingMask {
        columns: mask_t.data().iter().map(|&v| v != 0.0).collect(),
        acceleration: header.mask.acceleration,
        center_fraction: header.mask.center_fraction,
        seed: header.mask.seed,
    };
    Ok(SamplePair { gt, input, mask })
}

/// Generate `manifest.count` pairs split train/val 80/20 by index, plus the
/// root manifest. Phantom and mask seeds derive from `manifest.seed` and
/// the pair index.
pub fn generate_dataset(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    if manifest.train_count > manifest.count {
        return Err(Error::config("train_count exceeds count"));
    }
    for split in [Split::Train, Split::Val] {
        fs::create_dir_all(root.join("pairs").join(split.dir_name()))?;
    }
    for idx in 0..manifest.count {
        let gt = phantom(manifest.height, manifest.width, mix(manifest.seed, 2 * idx as u64))?;
        let mask = cartesian_mask(
            manifest.width,
            manifest.acceleration,
            manifest.center_fraction,
            mix(manifest.seed, 2 * idx as u64 + 1),
        )?;
        let pair = make_pair(&gt, &mask)?;
        let (split, local) = if idx < manifest.train_count {
            (Split::Train, idx)
        } else {
            (Split::Val, idx - manifest.train_count)
        };
        save_pair(
            &root.join("pairs").join(split.dir_name()).join(format!("{local}.clgt")),
            &pair,
        )?;
    }
    fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(root.join("manifest.json"))
        .map_err(|e| Error::integrity(format!("no dataset manifest at {}: {e}", root.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Load one split in index order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<SamplePair>> {
    let dir = root.join("pairs").join(split.dir_name());
    let mut pairs = Vec::new();
    for idx in 0.. {
        let path = dir.join(format!("{idx}.clgt"));
        if !path.exists() {
            break;
        }
        pairs.push(load_pair(&path)?);
    }
    if pairs.is_empty() {
        return Err(Error::integrity(format!("no pairs found in {}", dir.display())));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_manifest(dir_seed: u64) -> DatasetManifest {
        DatasetManifest {
            height: 32,
            width: 32,
            acceleration: 4,
            center_fraction: 0.08,
            seed: dir_seed,
            count: 5,
            train_count: 4,
        }
    }

    #[test]
    fn pair_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let gt = phantom(32, 32, 1).unwrap();
        let mask = cartesian_mask(32, 4, 0.08, 2).unwrap();
        let pair = make_pair(&gt, &mask).unwrap();
        let path = dir.path().join("p.clgt");
        save_pair(&path, &pair).unwrap();
        let back = load_pair(&path).unwrap();
        assert_eq!(back.gt, pair.gt);
        assert_eq!(back.input, pair.input);
        assert_eq!(back.mask, pair.mask);
    }

    #[test]
    fn truncated_pair_file_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let gt = phantom(32, 32, 3).unwrap();
        let mask = cartesian_mask(32, 4, 0.08, 4).unwrap();
        let path = dir.path().join("p.clgt");
        save_pair(&path, &make_pair(&gt, &mask).unwrap()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_pair(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn generate_splits_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_manifest(9);
        generate_dataset(dir.path(), &manifest).unwrap();

        assert_eq!(load_manifest(dir.path()).unwrap(), manifest);
        let train = load_split(dir.path(), Split::Train).unwrap();
        let val = load_split(dir.path(), Split::Val).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(val.len(), 1);

        // regeneration is byte-identical
        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(dir2.path(), &manifest).unwrap();
        for split in ["train", "val"] {
            let a_dir = dir.path().join("pairs").join(split);
            for entry in fs::read_dir(&a_dir).unwrap() {
                let name = entry.unwrap().file_name();
                let a = fs::read(a_dir.join(&name)).unwrap();
                let b = fs::read(dir2.path().join("pairs").join(split).join(&name)).unwrap();
                assert_eq!(a, b, "{split}/{name:?}");
            }
        }
    }
}
