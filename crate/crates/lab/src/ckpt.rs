//! XCT1 tensor container.
//!
//! ```text
//! "XCT1" | meta_len: u64 LE | payload_len: u64 LE | metadata (UTF-8) | payload
//! ```
//!
//! Metadata is line oriented:
//!
//! ```text
//! meta model.dim=64
//! tensor layer.0.attn.wq f32 64x64 0 16384
//! ```
//!
//! where a tensor line carries name, dtype, shape, byte offset into the
//! payload and byte length. Payload blobs are row-major little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use excitor_core::{Real, Tensor};

use crate::error::{FormatError, LabError, Result};

pub const MAGIC: [u8; 4] = *b"XCT1";
const HEADER: u64 = 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

/// Float types that can be stored in a container.
pub trait Scalar: Real {
    const KIND: DType;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const KIND: DType = DType::F32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const KIND: DType = DType::F64;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorEntry {
    pub fn from_tensor<R: Scalar>(name: &str, t: &Tensor<R>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * R::KIND.size());
        for &v in t.data() {
            v.put(&mut bytes);
        }
        Self {
            name: name.to_string(),
            dtype: R::KIND,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decode into `R`. Same dtype is bit-exact; otherwise values are cast.
    pub fn to_tensor<R: Scalar>(&self) -> Result<Tensor<R>> {
        let data: Vec<R> = match self.dtype {
            d if d == R::KIND => self.bytes.chunks_exact(d.size()).map(R::take).collect(),
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| R::from_f64(f64::from(f32::take(c))))
                .collect(),
            DType::F64 => self.bytes.chunks_exact(8).map(|c| R::from_f64(f64::take(c))).collect(),
        };
        Ok(Tensor::new(self.shape.clone(), data)?)
    }

    fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named tensors plus free-form `key=value` metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn push<R: Scalar>(&mut self, name: &str, t: &Tensor<R>) {
        self.tensors.push(TensorEntry::from_tensor(name, t));
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n', ' ']) || v.contains('\n') {
                return Err(FormatError::Other(format!("metadata entry {k:?} cannot be encoded")).into());
            }
            meta.push_str(&format!("meta {k}={v}\n"));
        }
        let mut offset = 0usize;
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tensors {
            if t.name.is_empty() || t.name.contains([' ', '\n']) || !seen.insert(t.name.as_str()) {
                return Err(FormatError::Tensor {
                    name: t.name.clone(),
                    msg: "empty, duplicate or contains whitespace".into(),
                }
                .into());
            }
            if t.bytes.len() != t.elements() * t.dtype.size() {
                return Err(FormatError::Tensor {
                    name: t.name.clone(),
                    msg: format!("{} bytes do not match shape {:?}", t.bytes.len(), t.shape),
                }
                .into());
            }
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let shape = if shape.is_empty() { "scalar".to_string() } else { shape.join("x") };
            meta.push_str(&format!(
                "tensor {} {} {} {} {}\n",
                t.name,
                t.dtype.name(),
                shape,
                offset,
                t.bytes.len()
            ));
            offset += t.bytes.len();
        }
        let mut out = Vec::with_capacity(HEADER as usize + meta.len() + offset);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&(offset as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let have = bytes.len() as u64;
        if have < 4 {
            return Err(FormatError::Truncated { need: HEADER, have });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        if have < HEADER {
            return Err(FormatError::Truncated { need: HEADER, have });
        }
        let meta_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let payload_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let need = HEADER
            .checked_add(meta_len)
            .and_then(|n| n.checked_add(payload_len))
            .ok_or_else(|| FormatError::Other("section lengths overflow".into()))?;
        if have < need {
            return Err(FormatError::Truncated { need, have });
        }
        if have > need {
            return Err(FormatError::TrailingBytes(have - need));
        }
        let meta_end = (HEADER + meta_len) as usize;
        let text = std::str::from_utf8(&bytes[HEADER as usize..meta_end])
            .map_err(|e| FormatError::Other(format!("metadata is not UTF-8: {e}")))?;
        let payload = &bytes[meta_end..];

        let mut ck = Checkpoint::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: &str| FormatError::Metadata {
                line: i + 1,
                msg: msg.to_string(),
            };
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                ck.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 {
                    return Err(bad("expected name dtype shape offset nbytes"));
                }
                let dtype = DType::parse(f[1]).ok_or_else(|| bad("unknown dtype"))?;
                let shape: Vec<usize> = if f[2] == "scalar" {
                    Vec::new()
                } else {
                    f[2].split('x')
                        .map(|d| d.parse().map_err(|_| bad("bad shape")))
                        .collect::<std::result::Result<_, _>>()?
                };
                let offset: u64 = f[3].parse().map_err(|_| bad("bad offset"))?;
                let nbytes: u64 = f[4].parse().map_err(|_| bad("bad size"))?;
                let elements = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                if elements.and_then(|e| e.checked_mul(dtype.size())) != Some(nbytes as usize) {
                    return Err(bad("size does not match shape"));
                }
                let end = offset.checked_add(nbytes).ok_or_else(|| bad("offset overflow"))?;
                if end > payload_len {
                    return Err(FormatError::Truncated {
                        need: HEADER + meta_len + end,
                        have,
                    });
                }
                if !seen.insert(f[0].to_string()) {
                    return Err(bad("duplicate tensor name"));
                }
                ck.tensors.push(TensorEntry {
                    name: f[0].to_string(),
                    dtype,
                    shape,
                    bytes: payload[offset as usize..end as usize].to_vec(),
                });
            } else if !line.is_empty() {
                return Err(bad("unrecognised line"));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Name of the only tensor in a visual feature file.
pub const VISUAL_TENSOR: &str = "visual.features";

pub fn save_visual<R: Scalar>(path: &Path, vp: &excitor_core::multimodal::VisualPrompt<R>) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.set_meta("source_id", &vp.source_id);
    ck.push(VISUAL_TENSOR, &vp.features);
    ck.save(path)
}

pub fn visual_from_checkpoint<R: Scalar>(ck: &Checkpoint) -> Result<excitor_core::multimodal::VisualPrompt<R>> {
    let names = ck.names();
    if names != [VISUAL_TENSOR] {
        return Err(FormatError::Other(format!(
            "visual feature file must hold exactly one tensor {VISUAL_TENSOR:?}, found {names:?}"
        ))
        .into());
    }
    let entry = &ck.tensors[0];
    if entry.shape.len() != 2 {
        return Err(FormatError::Tensor {
            name: entry.name.clone(),
            msg: format!("expected rank 2 (V x D), got shape {:?}", entry.shape),
        }
        .into());
    }
    let source = ck.meta.get("source_id").cloned().unwrap_or_default();
    let vp = excitor_core::multimodal::VisualPrompt::new(entry.to_tensor()?, source).map_err(|e| {
        LabError::Format(FormatError::Tensor {
            name: entry.name.clone(),
            msg: e.to_string(),
        })
    })?;
    Ok(vp)
}

pub fn load_visual<R: Scalar>(path: &Path) -> Result<excitor_core::multimodal::VisualPrompt<R>> {
    visual_from_checkpoint(&Checkpoint::load(path)?)
}
