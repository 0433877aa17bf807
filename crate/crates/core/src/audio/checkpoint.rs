//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "APBW"  u32 version  u64 step
//! u32 n_meta   { u32 len, key bytes, u32 len, value bytes } * n_meta
//! u32 n_tensor { u32 len, name bytes, u8 dtype, u32 rank, u64 dim * rank, u64 count } * n_tensor
//! payloads in manifest order (f32 or f64 per dtype tag)
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::autodiff::{Parameter, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"APBW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Values converted to `R`; exact when the stored width matches.
    pub fn to_real<R: Real>(&self) -> Vec<R> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| R::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| R::of(x)).collect(),
        }
    }
}

impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    /// Stores `f32` tensors as f32 and everything else as f64.
    pub fn from_tensor<R: Real>(name: impl Into<String>, t: &Tensor<R>) -> Self {
        let data = if R::NAME == "f32" {
            TensorData::F32(t.values().iter().map(|v| v.f64() as f32).collect())
        } else {
            TensorData::F64(t.values().iter().map(|v| v.f64()).collect())
        };
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn from_param<R: Real>(p: &Parameter<R>) -> Self {
        Self::from_tensor(p.name.clone(), &p.tensor)
    }

    pub fn from_values<R: Real>(name: impl Into<String>, shape: &[usize], values: &[R]) -> Self {
        let data = if R::NAME == "f32" {
            TensorData::F32(values.iter().map(|v| v.f64() as f32).collect())
        } else {
            TensorData::F64(values.iter().map(|v| v.f64()).collect())
        };
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn to_tensor<R: Real>(&self) -> Result<Tensor<R>> {
        Tensor::new(self.shape.clone(), self.data.to_real())
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            step: 0,
            tensors: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Equality ignores tensor order.
impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        if self.format_version != other.format_version
            || self.step != other.step
            || self.metadata != other.metadata
            || self.tensors.len() != other.tensors.len()
        {
            return false;
        }
        let mut a: Vec<&NamedTensor> = self.tensors.iter().collect();
        let mut b: Vec<&NamedTensor> = other.tensors.iter().collect();
        a.sort_by(|x, y| x.name.cmp(&y.name));
        b.sort_by(|x, y| x.name.cmp(&y.name));
        a == b
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if t.name.is_empty() {
                return Err(Error::Checkpoint("empty tensor name".into()));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {}", t.name)));
            }
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::Shape(format!(
                    "tensor {} has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_len(&mut out, self.metadata.len())?;
        for (k, v) in &self.metadata {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        put_len(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            put_str(&mut out, &t.name)?;
            out.push(t.data.tag());
            put_len(&mut out, t.shape.len())?;
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
        }
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let format_version = r.u32()?;
        if format_version > FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: format_version,
                supported: FORMAT_VERSION,
            });
        }
        let step = r.u64()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let tag = r.u8()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count = r.u64()? as usize;
            let expected = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if expected != Some(count) {
                return Err(Error::Shape(format!(
                    "tensor {name}: shape {shape:?} does not match stored length {count}"
                )));
            }
            manifest.push((name, tag, shape, count));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, tag, shape, count) in manifest {
            let data = match tag {
                0 => {
                    let raw = r.take(count.checked_mul(4).ok_or_else(truncated)?)?;
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                1 => {
                    let raw = r.take(count.checked_mul(8).ok_or_else(truncated)?)?;
                    TensorData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unknown dtype tag {other} for tensor {name}"
                    )))
                }
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payloads",
                bytes.len() - r.pos
            )));
        }
        let ckpt = Checkpoint {
            format_version,
            step,
            tensors,
            metadata,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn truncated() -> Error {
    Error::Checkpoint("truncated file".into())
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint("length exceeds u32".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_len(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(truncated)?;
        if end > self.buf.len() {
            return Err(truncated());
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in string".into()))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zeros_2x3() -> Checkpoint {
        Checkpoint {
            step: 7,
            tensors: vec![NamedTensor {
                name: "w".into(),
                shape: vec![2, 3],
                data: TensorData::F32(vec![0.0; 6]),
            }],
            ..Default::default()
        }
    }

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.apbw");
        let c = zeros_2x3();
        save_checkpoint(&p, &c).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
    }

    #[test]
    fn tampered_length_is_detected() {
        let mut bytes = zeros_2x3().to_bytes().unwrap();
        // the value-count u64 is the last field before the 24-byte payload
        let at = bytes.len() - 24 - 8;
        bytes[at] = 7;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Shape(_))));
    }

    #[test]
    fn truncated_and_future_versions_rejected() {
        let bytes = zeros_2x3().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&newer),
            Err(Error::CheckpointVersion { .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected_on_save() {
        let mut c = zeros_2x3();
        c.tensors.push(c.tensors[0].clone());
        assert!(c.to_bytes().is_err());
    }

    #[test]
    fn equality_ignores_tensor_order() {
        let mut a = zeros_2x3();
        a.tensors.push(NamedTensor {
            name: "b".into(),
            shape: vec![1],
            data: TensorData::F64(vec![1.5]),
        });
        let mut b = a.clone();
        b.tensors.reverse();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn random_payloads_round_trip(
            step in any::<u64>(),
            tensors in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 1..4), any::<bool>(), any::<u64>()),
                0..5,
            ),
            meta in proptest::collection::btree_map("[a-z]{1,8}", ".{0,16}", 0..4),
        ) {
            let tensors = tensors
                .into_iter()
                .enumerate()
                .map(|(i, (shape, wide, seed))| {
                    let n: usize = shape.iter().product();
                    let vals = (0..n).map(|k| f64::from_bits(seed.rotate_left(k as u32) & 0x3fef_ffff_ffff_ffff));
                    NamedTensor {
                        name: format!("t{i}"),
                        shape,
                        data: if wide {
                            TensorData::F64(vals.collect())
                        } else {
                            TensorData::F32(vals.map(|v| v as f32).collect())
                        },
                    }
                })
                .collect();
            let c = Checkpoint { format_version: FORMAT_VERSION, step, tensors, metadata: meta };
            let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
