//! The model bundle: named `f32` tensors in a single file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   8 bytes   magic "EPRBND01"
//! offset 8   u64       manifest length in bytes (M)
//! offset 16  M bytes   UTF-8 JSON manifest
//! offset 16+M          tensor payloads, concatenated in manifest order,
//!                      each row-major IEEE-754 float32
//! ```
//!
//! The manifest is `{"tensors": [{"name": .., "shape": [..], "dtype": "f32"}, ..]}`
//! with an optional `"metadata"` object of string values. Writing is
//! deterministic: the same bundle always produces the same bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, WeightTensor4D};

pub const MAGIC: &[u8; 8] = b"EPRBND01";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
}

impl DType {
    pub fn size(&self) -> usize {
        match self {
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// One named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Named tensors in insertion order plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelBundle {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    metadata: BTreeMap<String, String>,
}

impl ModelBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor. Names must be unique and `data` must fill `shape`.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Tensor {
                name,
                message: "duplicate tensor name".into(),
            });
        }
        if numel(&shape) != Some(data.len()) {
            return Err(Error::Tensor {
                name,
                message: format!("shape {shape:?} does not hold {} values", data.len()),
            });
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push(Tensor { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Tensor {
            name: name.to_string(),
            message: "missing from bundle".into(),
        })
    }

    /// Reads a conv (`[o, i, h, w]`) or fc (`[o, i]`) weight as a 4-D tensor,
    /// checking it against `expected`.
    pub fn weight4(&self, name: &str, expected: Shape4) -> Result<WeightTensor4D> {
        let t = self.require(name)?;
        let as4 = match t.shape.as_slice() {
            &[o, i, h, w] => Shape4::new(o, i, h, w),
            &[o, i] => Shape4::new(o, i, 1, 1),
            other => {
                return Err(Error::Tensor {
                    name: name.into(),
                    message: format!("expected a 2-D or 4-D weight, got shape {other:?}"),
                })
            }
        };
        if as4 != expected {
            return Err(Error::Tensor {
                name: name.into(),
                message: format!(
                    "shape {:?} does not match the architecture's {:?}",
                    t.shape,
                    expected.dims()
                ),
            });
        }
        let data = t.data.iter().map(|&v| f64::from(v)).collect();
        WeightTensor4D::new(name, as4, data)
    }

    /// Reads a 1-D tensor of length `len`.
    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let t = self.require(name)?;
        if t.shape != [len] {
            return Err(Error::Tensor {
                name: name.into(),
                message: format!("expected shape [{len}], got {:?}", t.shape),
            });
        }
        Ok(t.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            tensors: self
                .tensors
                .iter()
                .map(|t| ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Bundle(format!(
                "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Bundle("bad magic; not a model bundle".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[HEADER_LEN..];
        let mlen = usize::try_from(mlen)
            .ok()
            .filter(|&m| m <= rest.len())
            .ok_or_else(|| {
                Error::Bundle(format!(
                    "manifest length {mlen} exceeds the {} bytes after the header",
                    rest.len()
                ))
            })?;
        let manifest: Manifest = serde_json::from_slice(&rest[..mlen])
            .map_err(|e| Error::Bundle(format!("malformed manifest: {e}")))?;

        let mut payload = &rest[mlen..];
        let mut bundle = ModelBundle::new();
        bundle.metadata = manifest.metadata;
        for entry in manifest.tensors {
            let fail = |message: String| Error::Tensor {
                name: entry.name.clone(),
                message,
            };
            let dtype = match entry.dtype.as_str() {
                "f32" => DType::F32,
                other => return Err(fail(format!("unsupported dtype `{other}`"))),
            };
            let nbytes = numel(&entry.shape)
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| fail(format!("shape {:?} overflows", entry.shape)))?;
            if payload.len() < nbytes {
                return Err(fail(format!(
                    "shape {:?} needs {nbytes} payload bytes, only {} remain",
                    entry.shape,
                    payload.len()
                )));
            }
            let (mine, tail) = payload.split_at(nbytes);
            let data = mine
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            bundle.insert(entry.name.clone(), entry.shape, data)?;
            payload = tail;
        }
        if !payload.is_empty() {
            return Err(Error::Bundle(format!(
                "{} trailing bytes after the last tensor",
                payload.len()
            )));
        }
        Ok(bundle)
    }
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelBundle::from_bytes(&bytes)
}

pub fn write_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bundle.to_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(manifest: &str, payload: &[f32]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn short_payload_names_tensor() {
        let bytes = raw(
            r#"{"tensors":[{"name":"conv.weight","shape":[2,2],"dtype":"f32"}]}"#,
            &[1.0, 2.0, 3.0],
        );
        match ModelBundle::from_bytes(&bytes) {
            Err(Error::Tensor { name, .. }) => assert_eq!(name, "conv.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_unsupported_dtype() {
        let bytes = raw(r#"{"tensors":[{"name":"x","shape":[1],"dtype":"f16"}]}"#, &[0.0]);
        let err = ModelBundle::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported dtype"), "{err}");
    }

    #[test]
    fn rejects_structural_damage() {
        assert!(ModelBundle::from_bytes(b"EPRBND01").is_err());
        assert!(ModelBundle::from_bytes(&raw("{}", &[])).is_err());
        let mut bad_magic = raw(r#"{"tensors":[]}"#, &[]);
        bad_magic[0] = b'X';
        assert!(ModelBundle::from_bytes(&bad_magic).is_err());
        let trailing = raw(r#"{"tensors":[]}"#, &[1.0]);
        assert!(ModelBundle::from_bytes(&trailing).is_err());
        let mut huge = raw(r#"{"tensors":[]}"#, &[]);
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(ModelBundle::from_bytes(&huge).is_err());
    }

    #[test]
    fn insert_checks() {
        let mut b = ModelBundle::new();
        b.insert("a", vec![2], vec![1.0, 2.0]).unwrap();
        assert!(b.insert("a", vec![1], vec![1.0]).is_err());
        assert!(b.insert("b", vec![3], vec![1.0]).is_err());
        b.insert("scalar", vec![], vec![7.0]).unwrap();
        assert_eq!(ModelBundle::from_bytes(&b.to_bytes()).unwrap(), b);
    }

    #[test]
    fn fc_weights_read_as_4d() {
        let mut b = ModelBundle::new();
        b.insert("fc.weight", vec![2, 3], vec![0.0; 6]).unwrap();
        let w = b.weight4("fc.weight", Shape4::new(2, 3, 1, 1)).unwrap();
        assert_eq!(w.shape(), Shape4::new(2, 3, 1, 1));
        assert!(b.weight4("fc.weight", Shape4::new(3, 2, 1, 1)).is_err());
        assert!(b.weight4("missing", Shape4::new(1, 1, 1, 1)).is_err());
    }

    fn arb_bundle() -> impl Strategy<Value = ModelBundle> {
        let tensor = proptest::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            (Just(shape), proptest::collection::vec(any::<f32>(), n))
        });
        (
            proptest::collection::vec(tensor, 0..6),
            proptest::collection::btree_map("[a-z]{1,4}", "[ -~]{0,8}", 0..3),
        )
            .prop_map(|(tensors, meta)| {
                let mut b = ModelBundle::new();
                for (i, (shape, data)) in tensors.into_iter().enumerate() {
                    b.insert(format!("t{i}.weight"), shape, data).unwrap();
                }
                for (k, v) in meta {
                    b.set_metadata(k, v);
                }
                b
            })
    }

    proptest! {
        #[test]
        fn bytes_round_trip(b in arb_bundle()) {
            let bytes = b.to_bytes();
            let back = ModelBundle::from_bytes(&bytes).unwrap();
            // Compare bit patterns so NaN payloads count too.
            prop_assert_eq!(back.len(), b.len());
            for (x, y) in back.tensors().iter().zip(b.tensors()) {
                prop_assert_eq!(&x.name, &y.name);
                prop_assert_eq!(&x.shape, &y.shape);
                let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
