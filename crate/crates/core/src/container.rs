//! The `MXC1` model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MXC1" | u32 header length | UTF-8 JSON header | zero pad to 64 | payload
//! ```
//!
//! The JSON header carries the format version, the model configuration and a
//! tensor directory. Each directory entry points at a byte range of the
//! payload. Float tensors are stored as raw `f32` LE; quantized tensors are
//! stored as a sequence of parts described by their [`QuantDescriptor`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MXC1";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    pub model_config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// `"f32"` for dense tensors, `"packed"` for quantized ones.
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub quant: Option<QuantDescriptor>,
}

/// Quantization descriptor stored per packed directory entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantDescriptor {
    pub scheme: String,
    pub bits: u8,
    pub group_size: usize,
    pub outlier_cols: Vec<u32>,
    pub codebook: Vec<f32>,
    pub scale_dtype: String,
    /// Second-level grouping of block scales (nf4 only, 0 otherwise).
    pub scale_block: usize,
    pub parts: Vec<PartEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartEntry {
    pub role: String,
    pub dtype: String,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub payload: Vec<u8>,
}

impl Container {
    pub fn new(model_config: serde_json::Value) -> Self {
        Self {
            header: ContainerHeader {
                format_version: FORMAT_VERSION,
                model_config,
                tensors: Vec::new(),
            },
            payload: Vec::new(),
        }
    }

    pub fn push_f32(&mut self, name: &str, tensor: &Tensor) {
        let bytes = f32_to_bytes(tensor.data());
        self.push_raw(name, "f32", tensor.shape().to_vec(), None, &bytes);
    }

    pub fn push_packed(&mut self, name: &str, shape: Vec<usize>, desc: QuantDescriptor, bytes: &[u8]) {
        self.push_raw(name, "packed", shape, Some(desc), bytes);
    }

    fn push_raw(
        &mut self,
        name: &str,
        dtype: &str,
        shape: Vec<usize>,
        quant: Option<QuantDescriptor>,
        bytes: &[u8],
    ) {
        let offset = self.payload.len() as u64;
        self.payload.extend_from_slice(bytes);
        self.header.tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: dtype.to_string(),
            shape,
            offset,
            length: bytes.len() as u64,
            quant,
        });
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.header.tensors.iter().find(|e| e.name == name)
    }

    pub fn bytes_of(&self, entry: &TensorEntry) -> &[u8] {
        let start = entry.offset as usize;
        &self.payload[start..start + entry.length as usize]
    }

    pub fn read_f32(&self, entry: &TensorEntry) -> Result<Tensor> {
        if entry.dtype != "f32" {
            return Err(Error::format(
                entry.offset,
                format!("tensor {} is {}, not f32", entry.name, entry.dtype),
            ));
        }
        Tensor::new(entry.shape.clone(), bytes_to_f32(self.bytes_of(entry)))
            .map(|t| t.with_name(entry.name.clone()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let start = payload_start(header.len());
        let mut out = Vec::with_capacity(start + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(start, 0);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format(bytes.len() as u64, "truncated preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"MXC1\""));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if 8 + hlen > bytes.len() {
            return Err(Error::format(
                8,
                format!("truncated header: needs {hlen} bytes, file has {}", bytes.len() - 8),
            ));
        }
        let header: ContainerHeader = serde_json::from_slice(&bytes[8..8 + hlen])
            .map_err(|e| Error::format(8, format!("unreadable header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(
                8,
                format!("unsupported version {}", header.format_version),
            ));
        }
        let start = payload_start(hlen);
        if start > bytes.len() {
            return Err(Error::format(bytes.len() as u64, "truncated payload padding"));
        }
        let payload = bytes[start..].to_vec();
        for e in &header.tensors {
            let end = e.offset.checked_add(e.length);
            if end.is_none_or(|end| end > payload.len() as u64) {
                return Err(Error::format(
                    start as u64 + e.offset,
                    format!(
                        "directory overflow: {} spans {}+{} past payload of {}",
                        e.name,
                        e.offset,
                        e.length,
                        payload.len()
                    ),
                ));
            }
            if e.dtype == "f32" {
                let numel: usize = e.shape.iter().product();
                if numel as u64 * 4 != e.length {
                    return Err(Error::format(
                        start as u64 + e.offset,
                        format!("{}: shape {:?} disagrees with {} bytes", e.name, e.shape, e.length),
                    ));
                }
            }
            if let Some(q) = &e.quant {
                let parts: u64 = q.parts.iter().map(|p| p.length).sum();
                if parts != e.length {
                    return Err(Error::format(
                        start as u64 + e.offset,
                        format!("{}: parts cover {parts} of {} bytes", e.name, e.length),
                    ));
                }
            }
        }
        Ok(Self { header, payload })
    }

    pub fn write_to(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn payload_start(header_len: usize) -> usize {
    (8 + header_len).div_ceil(ALIGN) * ALIGN
}

pub fn f32_to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_to_f32(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}
