use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rounds half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

pub fn check_bits(bits: u8) -> Result<()> {
    if matches!(bits, 2 | 3 | 4 | 8) {
        Ok(())
    } else {
        Err(Error::config(format!("unsupported bit width {bits}; expected 2, 3, 4 or 8")))
    }
}

/// Integer range `[α_q, β_q]` of a `bits`-wide code.
pub fn code_range(bits: u8, signed: bool) -> (i32, i32) {
    if signed {
        (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
    } else {
        (0, (1 << bits) - 1)
    }
}

/// Scale and zero-point mapping the clip range `[α, β]` onto the code range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub sigma: f64,
    pub x0: i32,
    pub alpha: f64,
    pub beta: f64,
    pub bits: u8,
    pub signed: bool,
    /// Set when `α == β`; dequantization then returns `α`.
    pub degenerate: bool,
}

impl AffineParams {
    pub fn range(&self) -> (i32, i32) {
        code_range(self.bits, self.signed)
    }

    pub fn quantize_one(&self, x: f64) -> i32 {
        let (lo, hi) = self.range();
        if self.degenerate {
            return self.x0;
        }
        (round_half_away(x / self.sigma) + self.x0 as f64).clamp(lo as f64, hi as f64) as i32
    }

    pub fn dequantize_one(&self, code: i32) -> f64 {
        if self.degenerate {
            self.alpha
        } else {
            self.sigma * (code - self.x0) as f64
        }
    }
}

/// `σ = (β − α)/(β_q − α_q)`, `x₀ = round((β·α_q − α·β_q)/(β − α))`.
pub fn affine_params(alpha: f64, beta: f64, bits: u8, signed: bool) -> Result<AffineParams> {
    check_bits(bits)?;
    if !(alpha.is_finite() && beta.is_finite()) || alpha > beta {
        return Err(Error::config(format!("invalid clip range [{alpha}, {beta}]")));
    }
    let (aq, bq) = code_range(bits, signed);
    if alpha == beta {
        return Ok(AffineParams {
            sigma: 1.0,
            x0: aq,
            alpha,
            beta,
            bits,
            signed,
            degenerate: true,
        });
    }
    let sigma = (beta - alpha) / (bq - aq) as f64;
    let x0 = round_half_away((beta * aq as f64 - alpha * bq as f64) / (beta - alpha)) as i32;
    Ok(AffineParams {
        sigma,
        x0,
        alpha,
        beta,
        bits,
        signed,
        degenerate: false,
    })
}

pub fn quantize_affine(x: &[f32], p: &AffineParams) -> Vec<i32> {
    x.iter().map(|&v| p.quantize_one(v as f64)).collect()
}

pub fn dequantize_affine(codes: &[i32], p: &AffineParams) -> Vec<f32> {
    codes.iter().map(|&c| p.dequantize_one(c) as f32).collect()
}

/// Quantizes with the clip range taken from the data itself.
pub fn dynamic_quantize(x: &[f32], bits: u8, signed: bool) -> Result<(Vec<i32>, AffineParams)> {
    if x.is_empty() {
        return Err(Error::Input("dynamic quantization of an empty tensor".into()));
    }
    let (lo, hi) = x.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let p = affine_params(lo as f64, hi as f64, bits, signed)?;
    Ok((quantize_affine(x, &p), p))
}
