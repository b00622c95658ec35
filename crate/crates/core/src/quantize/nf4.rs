use std::sync::OnceLock;

use statrs::distribution::{ContinuousCDF, Normal};

use super::affine::round_half_away;

pub const NF4_BLOCK: usize = 64;
pub const NF4_SCALE_BLOCK: usize = 256;
/// Index of the exact-zero level.
pub const ZERO_LEVEL: u8 = 7;

/// Sixteen normal-quantile levels in `[-1, 1]`, sorted, with level 7 set to 0.
pub fn codebook() -> &'static [f32; 16] {
    static BOOK: OnceLock<[f32; 16]> = OnceLock::new();
    BOOK.get_or_init(|| {
        let n = Normal::new(0.0, 1.0).expect("standard normal");
        let q: Vec<f64> = (0..16).map(|i| n.inverse_cdf((i as f64 + 0.5) / 16.0)).collect();
        let max = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut book = [0.0f32; 16];
        for (b, v) in book.iter_mut().zip(&q) {
            *b = (v / max) as f32;
        }
        book[ZERO_LEVEL as usize] = 0.0;
        book
    })
}

fn nearest_level(x: f32) -> u8 {
    let book = codebook();
    let mut best = 0;
    let mut dist = f32::INFINITY;
    for (i, &l) in book.iter().enumerate() {
        let d = (x - l).abs();
        if d < dist {
            dist = d;
            best = i;
        }
    }
    best as u8
}

/// Blockwise nf4 codes with double-quantized block scales.
#[derive(Clone, Debug, PartialEq)]
pub struct Nf4 {
    pub len: usize,
    pub block: usize,
    pub scale_block: usize,
    /// One 4-bit level index per element.
    pub codes: Vec<u8>,
    /// 8-bit code per block scale.
    pub scale_codes: Vec<u8>,
    /// One float meta-scale per group of `scale_block` block scales.
    pub meta_scales: Vec<f32>,
    /// Number of blocks whose absmax was zero.
    pub zero_blocks: usize,
}

pub fn nf4_quantize(w: &[f32], block: usize, scale_block: usize) -> Nf4 {
    assert!(block > 0 && scale_block > 0, "block sizes must be positive");
    let scales: Vec<f32> = w
        .chunks(block)
        .map(|b| b.iter().fold(0.0f32, |m, v| m.max(v.abs())))
        .collect();
    let mut scale_codes = Vec::with_capacity(scales.len());
    let mut meta_scales = Vec::with_capacity(scales.len().div_ceil(scale_block));
    for group in scales.chunks(scale_block) {
        let meta = group.iter().fold(0.0f32, |m, &s| m.max(s));
        meta_scales.push(meta);
        for &s in group {
            let c = if meta == 0.0 { 0.0 } else { round_half_away(s as f64 / meta as f64 * 255.0) };
            scale_codes.push(c.clamp(0.0, 255.0) as u8);
        }
    }
    let mut out = Nf4 {
        len: w.len(),
        block,
        scale_block,
        codes: Vec::with_capacity(w.len()),
        scale_codes,
        meta_scales,
        zero_blocks: 0,
    };
    for (bi, b) in w.chunks(block).enumerate() {
        let s = out.block_scale(bi);
        if s == 0.0 {
            out.zero_blocks += 1;
            out.codes.extend(std::iter::repeat_n(ZERO_LEVEL, b.len()));
        } else {
            out.codes.extend(b.iter().map(|&v| nearest_level(v / s)));
        }
    }
    out
}

impl Nf4 {
    /// Reconstructed scale of block `bi`.
    pub fn block_scale(&self, bi: usize) -> f32 {
        let meta = self.meta_scales[bi / self.scale_block];
        meta * (self.scale_codes[bi] as f32 / 255.0)
    }

    pub fn dequantize_range(&self, range: std::ops::Range<usize>) -> Vec<f32> {
        let book = codebook();
        range
            .map(|i| book[self.codes[i] as usize] * self.block_scale(i / self.block))
            .collect()
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.dequantize_range(0..self.len)
    }
}
