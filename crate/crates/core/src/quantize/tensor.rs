use serde::{Deserialize, Serialize};

use super::absmax::Absmax8;
use super::affine::AffineParams;
use super::gptq::{GridCodes, GroupGrid};
use super::nf4::{codebook, Nf4};
use super::pack::{pack_codes, row_bytes, unpack_codes};
use crate::container::{bytes_to_f32, f32_to_bytes, PartEntry, QuantDescriptor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Uncalibrated per-group min/max grid (round-to-nearest).
    Affine,
    Absmax8,
    Nf4,
    Gptq,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::Affine => "affine",
            Scheme::Absmax8 => "absmax8",
            Scheme::Nf4 => "nf4",
            Scheme::Gptq => "gptq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(Scheme::Affine),
            "absmax8" => Ok(Scheme::Absmax8),
            "nf4" => Ok(Scheme::Nf4),
            "gptq" => Ok(Scheme::Gptq),
            _ => Err(Error::config(format!("unknown scheme {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantData {
    Grid(GridCodes),
    Absmax(Absmax8),
    Nf4(Nf4),
}

/// A quantized `rows × cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub scheme: Scheme,
    pub rows: usize,
    pub cols: usize,
    pub data: QuantData,
}

impl QuantizedTensor {
    pub fn bits(&self) -> u8 {
        match &self.data {
            QuantData::Grid(g) => g.grid.bits,
            QuantData::Absmax(_) => 8,
            QuantData::Nf4(_) => 4,
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        match &self.data {
            QuantData::Grid(g) => g.dequantize(),
            QuantData::Absmax(a) => a.dequantize(),
            QuantData::Nf4(n) => n.dequantize(),
        }
    }

    pub fn dequantize_rows(&self, rows: &[usize]) -> Vec<f32> {
        let cols = self.cols;
        match &self.data {
            QuantData::Grid(g) => rows
                .iter()
                .flat_map(|&r| {
                    (0..cols).map(move |j| g.grid.param(r, j).dequantize_one(g.codes[r * cols + j] as i32) as f32)
                })
                .collect(),
            QuantData::Absmax(a) => a.dequantize_rows(rows),
            QuantData::Nf4(n) => rows
                .iter()
                .flat_map(|&r| n.dequantize_range(r * cols..(r + 1) * cols))
                .collect(),
        }
    }

    /// Serialized descriptor and payload bytes.
    pub fn to_parts(&self) -> (QuantDescriptor, Vec<u8>) {
        let mut bytes = Vec::new();
        let mut parts = Vec::new();
        let mut push = |role: &str, dtype: &str, b: Vec<u8>| {
            parts.push(PartEntry {
                role: role.into(),
                dtype: dtype.into(),
                length: b.len() as u64,
            });
            bytes.extend_from_slice(&b);
        };
        let (rows, cols) = (self.rows, self.cols);
        let desc = |group_size, outlier_cols, codebook, scale_dtype: &str, scale_block| QuantDescriptor {
            scheme: self.scheme.label().into(),
            bits: self.bits(),
            group_size,
            outlier_cols,
            codebook,
            scale_dtype: scale_dtype.into(),
            scale_block,
            parts: Vec::new(),
        };
        let mut d = match &self.data {
            QuantData::Grid(g) => {
                push("codes", "packed", pack_codes(&g.codes, rows, cols, g.grid.bits));
                let sigmas: Vec<f32> = g.grid.params.iter().map(|p| p.sigma as f32).collect();
                push("scales", "f32", f32_to_bytes(&sigmas));
                push("zero_points", "u8", g.grid.params.iter().map(|p| p.x0 as u8).collect());
                desc(g.grid.group_size, Vec::new(), Vec::new(), "f32", 0)
            }
            QuantData::Absmax(a) => {
                let n_q = cols - a.outlier_cols.len();
                let codes: Vec<u8> = a.codes.iter().map(|&c| c as u8).collect();
                push("codes", "packed", pack_codes(&codes, rows, n_q, 8));
                push("scales", "f32", f32_to_bytes(&a.scales));
                push("outliers", "f32", f32_to_bytes(&a.outliers));
                desc(cols, a.outlier_cols.clone(), Vec::new(), "f32", 0)
            }
            QuantData::Nf4(n) => {
                push("codes", "packed", pack_codes(&n.codes, rows, cols, 4));
                push("scale_codes", "u8", n.scale_codes.clone());
                push("meta_scales", "f32", f32_to_bytes(&n.meta_scales));
                desc(n.block, Vec::new(), codebook().to_vec(), "u8", n.scale_block)
            }
        };
        d.parts = parts;
        (d, bytes)
    }

    pub fn from_parts(desc: &QuantDescriptor, shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::format(0, msg);
        let [rows, cols] = <[usize; 2]>::try_from(shape).map_err(|_| bad(format!("quantized shape {shape:?} is not 2-D")))?;
        let part = |role: &str, expect: usize| -> Result<&[u8]> {
            let p = desc
                .parts
                .iter()
                .find(|p| p.role == role)
                .ok_or_else(|| bad(format!("missing part {role}")))?;
            let start: usize = desc
                .parts
                .iter()
                .take_while(|q| q.role != role)
                .map(|q| q.length as usize)
                .sum();
            if p.length as usize != expect {
                return Err(bad(format!("part {role} has {} bytes, expected {expect}", p.length)));
            }
            Ok(&bytes[start..start + expect])
        };
        let scheme = Scheme::parse(&desc.scheme)?;
        let data = match scheme {
            Scheme::Affine | Scheme::Gptq => {
                let bits = desc.bits;
                super::affine::check_bits(bits)?;
                let group_size = desc.group_size.max(1);
                let groups = rows * cols.div_ceil(group_size);
                let codes = unpack_codes(part("codes", rows * row_bytes(cols, bits))?, rows, cols, bits);
                let sigmas = bytes_to_f32(part("scales", groups * 4)?);
                let zps = part("zero_points", groups)?.to_vec();
                let params = sigmas
                    .iter()
                    .zip(&zps)
                    .map(|(&s, &z)| AffineParams {
                        sigma: s as f64,
                        x0: z as i32,
                        alpha: -(s as f64) * z as f64,
                        beta: s as f64 * (((1u32 << bits) - 1) as f64 - z as f64),
                        bits,
                        signed: false,
                        degenerate: false,
                    })
                    .collect();
                QuantData::Grid(GridCodes {
                    grid: GroupGrid {
                        rows,
                        cols,
                        group_size,
                        bits,
                        params,
                    },
                    codes,
                    fell_back: false,
                })
            }
            Scheme::Absmax8 => {
                let outlier_cols = desc.outlier_cols.clone();
                if outlier_cols.windows(2).any(|w| w[0] >= w[1]) || outlier_cols.iter().any(|&c| c as usize >= cols) {
                    return Err(bad("outlier columns must be increasing and in range".into()));
                }
                let n_q = cols - outlier_cols.len();
                let codes = unpack_codes(part("codes", rows * n_q)?, rows, n_q, 8);
                QuantData::Absmax(Absmax8 {
                    rows,
                    cols,
                    codes: codes.into_iter().map(|c| c as i8).collect(),
                    scales: bytes_to_f32(part("scales", rows * 4)?),
                    outliers: bytes_to_f32(part("outliers", rows * outlier_cols.len() * 4)?),
                    all_outliers: n_q == 0 && cols > 0,
                    outlier_cols,
                })
            }
            Scheme::Nf4 => {
                let block = desc.group_size.max(1);
                let scale_block = desc.scale_block.max(1);
                let n_blocks = (rows * cols).div_ceil(block);
                let codes = unpack_codes(part("codes", rows * row_bytes(cols, 4))?, rows, cols, 4);
                let scale_codes = part("scale_codes", n_blocks)?.to_vec();
                let meta_scales = bytes_to_f32(part("meta_scales", n_blocks.div_ceil(scale_block) * 4)?);
                let zero_blocks = 0;
                QuantData::Nf4(Nf4 {
                    len: rows * cols,
                    block,
                    scale_block,
                    codes,
                    scale_codes,
                    meta_scales,
                    zero_blocks,
                })
            }
        };
        Ok(Self { scheme, rows, cols, data })
    }

    /// Bytes of the serialized payload.
    pub fn storage_bytes(&self) -> usize {
        self.to_parts().1.len()
    }
}
