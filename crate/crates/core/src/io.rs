//! Interchange tensor files and dataset manifests.
//!
//! Tensor file layout, all integers little-endian:
//!
//! | offset      | size       | field                              |
//! |-------------|------------|------------------------------------|
//! | 0           | 4          | magic `BVQF`                       |
//! | 4           | 4 (u32)    | format version, currently 1        |
//! | 8           | 4 (u32)    | dtype code, 0 = float32            |
//! | 12          | 4 (u32)    | ndim                               |
//! | 16          | 8·ndim     | dims (u64 each)                    |
//! | 16 + 8·ndim | 4·Π dims   | row-major float32 payload          |

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BVQF";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
const HEADER_FIXED: usize = 16;

/// Raw contents of a tensor file, kept in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let expected = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d));
        if expected != Some(data.len() as u64) {
            return Err(Error::InvalidShape {
                op: "tensor_file",
                detail: format!("dims {dims:?} do not match {} values", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Promotes the payload to `f64`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let shape = self.dims.iter().map(|&d| d as usize).collect();
        Tensor::new(shape, self.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(HEADER_FIXED + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format(path, detail);
        if bytes.len() < HEADER_FIXED {
            return Err(bad(format!(
                "header truncated: expected at least {HEADER_FIXED} bytes, found {}",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(bad(format!("unknown magic {:?}", &bytes[0..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let dtype = u32_at(8);
        if dtype != DTYPE_F32 {
            return Err(bad(format!("unsupported dtype code {dtype}")));
        }
        let ndim = u32_at(12) as usize;
        let dims_end = HEADER_FIXED + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(bad(format!(
                "header truncated: expected {dims_end} bytes for {ndim} dims, found {}",
                bytes.len()
            )));
        }
        let dims: Vec<u64> = (0..ndim)
            .map(|i| {
                let o = HEADER_FIXED + 8 * i;
                u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"))
            })
            .collect();
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| usize::try_from(n).ok())
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad(format!("dims {dims:?} overflow")))?;
        let payload = &bytes[dims_end..];
        if payload.len() != count {
            return Err(bad(format!(
                "payload size mismatch: expected {count} bytes, found {}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::decode(&bytes, path)
}

pub fn write_tensor_file(path: &Path, file: &TensorFile) -> Result<()> {
    std::fs::write(path, file.encode()).map_err(|e| Error::io(path, e))
}

/// Reads a tensor file and promotes it to `f64`.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_tensor_file(path)?.to_tensor()
}

/// Writes a tensor, narrowing its payload to `f32`.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_tensor_file(path, &TensorFile::from_tensor(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub video_id: String,
    pub mos: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mos_std: Option<f64>,
    pub database_id: String,
    pub fused_feature_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub split: Split,
    pub seed: u64,
    pub records: Vec<VideoRecord>,
    /// Directory relative feature paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(split: Split, seed: u64, records: Vec<VideoRecord>) -> Self {
        Self {
            split,
            seed,
            records,
            base_dir: PathBuf::new(),
        }
    }

    pub fn resolve(&self, record: &VideoRecord) -> PathBuf {
        self.base_dir.join(&record.fused_feature_path)
    }

    pub fn database_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.database_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    fn check_unique(&self, path: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.video_id.as_str()) {
                return Err(Error::format(
                    path,
                    format!("duplicate video_id `{}`", r.video_id),
                ));
            }
        }
        Ok(())
    }
}

/// Loads a manifest, checking id uniqueness and that every feature file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.check_unique(path)?;
    let missing: Vec<String> = manifest
        .records
        .iter()
        .map(|r| manifest.resolve(r))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::format(
            path,
            format!("missing feature files: {}", missing.join(", ")),
        ));
    }
    Ok(manifest)
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    manifest.check_unique(path)?;
    let text = serde_json::to_string_pretty(manifest).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Shuffles records with `seed` and cuts them 60/20/20 into train/val/test.
pub fn split_records(records: &[VideoRecord], seed: u64) -> [Manifest; 3] {
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_train = (n as f64 * 0.6).round() as usize;
    let n_val = ((n as f64 * 0.2).round() as usize).min(n - n_train);
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    [
        Manifest::new(Split::Train, seed, shuffled),
        Manifest::new(Split::Val, seed, val),
        Manifest::new(Split::Test, seed, test),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, path: &str) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            mos: 3.0,
            mos_std: None,
            database_id: "db".into(),
            fused_feature_path: PathBuf::from(path),
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let f = TensorFile::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = f.encode();
        assert_eq!(&bytes[0..4], b"BVQF");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[0, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[24..32], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[32..36], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let f = TensorFile::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = f.encode();
        bytes.truncate(bytes.len() - 2);
        let err = TensorFile::decode(&bytes, Path::new("x.bvqf")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 12 bytes"), "{msg}");
        assert!(msg.contains("found 10"), "{msg}");
    }

    #[test]
    fn rejects_unknown_header_fields() {
        let good = TensorFile::new(vec![1], vec![0.0]).unwrap().encode();
        let p = Path::new("x");
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(TensorFile::decode(&bad, p).is_err());
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(TensorFile::decode(&bad, p).is_err());
        let mut bad = good;
        bad[8] = 1;
        assert!(TensorFile::decode(&bad, p).is_err());
    }

    #[test]
    fn manifest_round_trip_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        write_tensor(&dir.path().join("a.bvqf"), &Tensor::zeros(&[2, 3])).unwrap();
        let m = Manifest::new(
            Split::Train,
            7,
            vec![record("a", "a.bvqf"), record("b", "missing.bvqf")],
        );
        let path = dir.path().join("m.json");
        save_manifest(&path, &m).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("missing.bvqf"), "{err}");

        let m = Manifest::new(Split::Train, 7, vec![record("a", "a.bvqf")]);
        save_manifest(&path, &m).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.records, m.records);
        assert_eq!(loaded.resolve(&loaded.records[0]), dir.path().join("a.bvqf"));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let m = Manifest::new(
            Split::All,
            0,
            vec![record("a", "a.bvqf"), record("a", "b.bvqf")],
        );
        let dir = tempfile::tempdir().unwrap();
        assert!(save_manifest(&dir.path().join("m.json"), &m).is_err());
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, r#"{"split":"train","seed":1,"records":[],"extra":1}"#).unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn split_is_60_20_20_and_seeded() {
        let records: Vec<_> = (0..10).map(|i| record(&format!("v{i}"), "x")).collect();
        let [train, val, test] = split_records(&records, 11);
        assert_eq!((train.records.len(), val.records.len(), test.records.len()), (6, 2, 2));
        let again = split_records(&records, 11);
        assert_eq!(again[0].records, train.records);
        let mut ids: Vec<_> = train
            .records
            .iter()
            .chain(&val.records)
            .chain(&test.records)
            .map(|r| r.video_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }
}
