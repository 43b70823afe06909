//! Named-tensor checkpoint container, binary file format and interpolation.
//!
//! File layout: a magic line, a one-line JSON manifest (name, shape, element
//! type and byte offset per tensor, plus the model configuration when one is
//! attached), then the raw little-endian payload concatenated in manifest
//! order. Save/load round-trips bitwise.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Dtype;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &str = "BIVOX-CKPT 1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().size_bytes()
    }

    fn write_le<W: Write>(&self, w: &mut W) -> Result<()> {
        match self {
            TensorData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    fn read_le(dtype: Dtype, count: usize, bytes: &[u8]) -> Result<TensorData> {
        let need = count * dtype.size_bytes();
        if bytes.len() < need {
            return Err(Error::CheckpointFormat(format!(
                "payload too short: need {need} bytes, have {}",
                bytes.len()
            )));
        }
        Ok(match dtype {
            Dtype::F32 => TensorData::F32(
                bytes[..need]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes[..need]
                    .chunks_exact(8)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                    })
                    .collect(),
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// Ordered named-tensor container. Houses the base model, stage outputs and
/// everything the interpolation step touches.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: Option<ModelConfig>,
    entries: IndexMap<String, CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(default)]
    config: Option<ModelConfig>,
    tensors: Vec<ManifestTensor>,
}

impl Checkpoint {
    pub fn new(config: Option<ModelConfig>) -> Self {
        Checkpoint {
            config,
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries
            .insert(name.into(), CheckpointEntry { shape, data });
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CheckpointEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps only entries whose name passes the filter.
    pub fn retain<F: Fn(&str) -> bool>(&mut self, keep: F) {
        self.entries.retain(|name, _| keep(name));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut offset = 0usize;
        let tensors = self
            .entries
            .iter()
            .map(|(name, e)| {
                let t = ManifestTensor {
                    name: name.clone(),
                    dtype: e.data.dtype(),
                    shape: e.shape.clone(),
                    offset,
                };
                offset += e.data.byte_len();
                t
            })
            .collect();
        let manifest = Manifest {
            version: 1,
            config: self.config.clone(),
            tensors,
        };
        writeln!(w, "{MAGIC}")?;
        serde_json::to_writer(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        for e in self.entries.values() {
            e.data.write_le(&mut w)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::read(&bytes)
    }

    pub fn read(bytes: &[u8]) -> Result<Self> {
        let magic_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CheckpointFormat("missing magic line".into()))?;
        let magic = std::str::from_utf8(&bytes[..magic_end])
            .map_err(|_| Error::CheckpointFormat("magic line is not UTF-8".into()))?;
        if magic != MAGIC {
            return Err(Error::CheckpointFormat(format!(
                "bad magic `{magic}`, expected `{MAGIC}`"
            )));
        }
        let rest = &bytes[magic_end + 1..];
        let manifest_end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CheckpointFormat("missing manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&rest[..manifest_end])?;
        if manifest.version != 1 {
            return Err(Error::CheckpointFormat(format!(
                "unsupported version {}",
                manifest.version
            )));
        }
        let payload = &rest[manifest_end + 1..];
        let mut ckpt = Checkpoint::new(manifest.config);
        for t in manifest.tensors {
            let count: usize = t.shape.iter().product();
            if t.offset > payload.len() {
                return Err(Error::CheckpointFormat(format!(
                    "tensor `{}` offset {} beyond payload",
                    t.name, t.offset
                )));
            }
            let data = TensorData::read_le(t.dtype, count, &payload[t.offset..])?;
            ckpt.insert(t.name, t.shape, data);
        }
        Ok(ckpt)
    }
}

/// Interpolates two checkpoints: `α·m1 + (1−α)·m0` elementwise on every
/// shared name; names present in only one input are copied through
/// unchanged (the new-module parameters of `m1` in the two-stage pipeline).
pub fn merge_checkpoints(m1: &Checkpoint, m0: &Checkpoint, alpha: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "interpolation weight must be in [0,1], got {alpha}"
        )));
    }
    let mut out = Checkpoint::new(m1.config.clone().or_else(|| m0.config.clone()));
    for (name, e1) in m1.iter() {
        match m0.get(name) {
            None => out.insert(name, e1.shape.clone(), e1.data.clone()),
            Some(e0) => {
                if e0.shape != e1.shape || e0.data.dtype() != e1.data.dtype() {
                    return Err(Error::ShapeMismatch {
                        name: name.to_string(),
                        left: e1.shape.clone(),
                        right: e0.shape.clone(),
                    });
                }
                let data = match (&e1.data, &e0.data) {
                    (TensorData::F32(a), TensorData::F32(b)) => {
                        let ca = alpha as f32;
                        let cb = (1.0 - alpha) as f32;
                        TensorData::F32(
                            a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect(),
                        )
                    }
                    (TensorData::F64(a), TensorData::F64(b)) => TensorData::F64(
                        a.iter()
                            .zip(b)
                            .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
                            .collect(),
                    ),
                    _ => unreachable!("dtype equality checked above"),
                };
                out.insert(name, e1.shape.clone(), data);
            }
        }
    }
    for (name, e0) in m0.iter() {
        if m1.get(name).is_none() {
            out.insert(name, e0.shape.clone(), e0.data.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(vals1: &[f32], vals0: &[f32]) -> (Checkpoint, Checkpoint) {
        let mut m1 = Checkpoint::new(None);
        m1.insert("shared.w", vec![2, 2], TensorData::F32(vals1.to_vec()));
        m1.insert("new.module", vec![1, 2], TensorData::F32(vec![9.0, -9.0]));
        let mut m0 = Checkpoint::new(None);
        m0.insert("shared.w", vec![2, 2], TensorData::F32(vals0.to_vec()));
        (m1, m0)
    }

    #[test]
    fn merge_alpha_zero_keeps_base_and_new_modules() {
        let (m1, m0) = sample(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]);
        let merged = merge_checkpoints(&m1, &m0, 0.0).unwrap();
        assert_eq!(merged.get("shared.w").unwrap().data, m0.get("shared.w").unwrap().data);
        assert_eq!(merged.get("new.module").unwrap().data, m1.get("new.module").unwrap().data);
    }

    #[test]
    fn merge_alpha_one_is_m1() {
        let (m1, m0) = sample(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]);
        let merged = merge_checkpoints(&m1, &m0, 1.0).unwrap();
        for name in ["shared.w", "new.module"] {
            assert_eq!(merged.get(name).unwrap().data, m1.get(name).unwrap().data);
        }
    }

    #[test]
    fn merge_midpoint_scalar() {
        let mut m1 = Checkpoint::new(None);
        m1.insert("p", vec![1], TensorData::F32(vec![3.0]));
        let mut m0 = Checkpoint::new(None);
        m0.insert("p", vec![1], TensorData::F32(vec![1.0]));
        let merged = merge_checkpoints(&m1, &m0, 0.5).unwrap();
        assert_eq!(merged.get("p").unwrap().data, TensorData::F32(vec![2.0]));
    }

    #[test]
    fn merge_of_identical_checkpoints_is_identity() {
        let (m1, _) = sample(&[1.5, -2.25, 0.0, 4.0], &[0.0; 4]);
        for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let merged = merge_checkpoints(&m1, &m1, alpha).unwrap();
            assert_eq!(merged.entries, m1.entries);
        }
    }

    #[test]
    fn merge_rejects_shape_mismatch_and_bad_alpha() {
        let (m1, _) = sample(&[1.0; 4], &[0.0; 4]);
        let mut bad = Checkpoint::new(None);
        bad.insert("shared.w", vec![4, 1], TensorData::F32(vec![0.0; 4]));
        assert!(matches!(
            merge_checkpoints(&m1, &bad, 0.5),
            Err(Error::ShapeMismatch { .. })
        ));
        let (m1, m0) = sample(&[1.0; 4], &[0.0; 4]);
        assert!(merge_checkpoints(&m1, &m0, 1.5).is_err());
        assert!(merge_checkpoints(&m1, &m0, -0.1).is_err());
    }

    #[test]
    fn file_round_trip_is_bitwise_for_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new(Some(ModelConfig::default()));
        ck.insert(
            "a.weight",
            vec![2, 3],
            TensorData::F32(vec![1.0, -0.5, 3.25e-7, f32::MIN_POSITIVE, 0.0, -0.0]),
        );
        ck.insert(
            "b.weight",
            vec![2],
            TensorData::F64(vec![std::f64::consts::PI, -1e-300]),
        );
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config, ck.config);
        for name in ["a.weight", "b.weight"] {
            let (l, r) = (loaded.get(name).unwrap(), ck.get(name).unwrap());
            assert_eq!(l.shape, r.shape);
            match (&l.data, &r.data) {
                (TensorData::F32(a), TensorData::F32(b)) => {
                    for (x, y) in a.iter().zip(b) {
                        assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
                (TensorData::F64(a), TensorData::F64(b)) => {
                    for (x, y) in a.iter().zip(b) {
                        assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
                _ => panic!("dtype changed across round trip"),
            }
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(Checkpoint::read(b"not a checkpoint\n{}\n").is_err());
        assert!(Checkpoint::read(b"").is_err());
        let mut ck = Checkpoint::new(None);
        ck.insert("w", vec![4], TensorData::F32(vec![1.0; 4]));
        let mut bytes = Vec::new();
        ck.write(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3); // chop payload
        assert!(Checkpoint::read(&bytes).is_err());
    }
}
