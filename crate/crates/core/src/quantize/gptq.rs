use nalgebra::DMatrix;

use super::affine::{affine_params, check_bits, AffineParams};
use crate::error::{Error, Result};

pub const DEFAULT_GROUP: usize = 128;
pub const DEFAULT_DAMPING: f64 = 0.01;

/// Per-row, per-column-group affine grid. Ranges always include zero so an
/// exact 0 stays representable.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupGrid {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub bits: u8,
    /// `rows × groups_per_row`, row-major.
    pub params: Vec<AffineParams>,
}

impl GroupGrid {
    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn param(&self, row: usize, col: usize) -> &AffineParams {
        &self.params[row * self.groups_per_row() + col / self.group_size]
    }

    /// Grid fitted to the min/max of each row group of `w`.
    pub fn fit(w: &[f32], rows: usize, cols: usize, group_size: usize, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if w.len() != rows * cols {
            return Err(Error::dim("weight length disagrees with shape"));
        }
        if group_size == 0 {
            return Err(Error::config("group size must be positive"));
        }
        let mut params = Vec::with_capacity(rows * cols.div_ceil(group_size));
        for row in w.chunks_exact(cols) {
            for g in row.chunks(group_size) {
                let (lo, hi) = g.iter().fold((0.0f32, 0.0f32), |(l, h), &v| (l.min(v), h.max(v)));
                let mut p = affine_params(lo as f64, hi as f64, bits, false)?;
                // Stored scales are f32; keep the in-memory grid identical.
                p.sigma = p.sigma as f32 as f64;
                params.push(p);
            }
        }
        Ok(Self {
            rows,
            cols,
            group_size,
            bits,
            params,
        })
    }

    pub fn quantize(&self, row: usize, col: usize, v: f64) -> (u8, f64) {
        let p = self.param(row, col);
        let c = p.quantize_one(v);
        (c as u8, p.dequantize_one(c))
    }
}

/// Codes of a grid-quantized matrix plus the grid itself.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCodes {
    pub grid: GroupGrid,
    pub codes: Vec<u8>,
    /// True when GPTQ fell back to round-to-nearest.
    pub fell_back: bool,
}

impl GridCodes {
    pub fn dequantize(&self) -> Vec<f32> {
        let cols = self.grid.cols;
        self.codes
            .iter()
            .enumerate()
            .map(|(i, &c)| self.grid.param(i / cols, i % cols).dequantize_one(c as i32) as f32)
            .collect()
    }
}

/// Round-to-nearest on the per-group grid.
pub fn rtn_layer(w: &[f32], rows: usize, cols: usize, bits: u8, group_size: usize) -> Result<GridCodes> {
    let grid = GroupGrid::fit(w, rows, cols, group_size, bits)?;
    let codes = w
        .iter()
        .enumerate()
        .map(|(i, &v)| grid.quantize(i / cols, i % cols, v as f64).0)
        .collect();
    Ok(GridCodes {
        grid,
        codes,
        fell_back: false,
    })
}

/// Calibrated quantization of `w[rows × cols]` given calibration inputs
/// `x[m × cols]` (one row per token).
///
/// Columns are quantized left to right on the same grid round-to-nearest
/// would use; each column's rounding error, scaled by the inverse-Hessian
/// Cholesky factor, is pushed onto the columns not yet quantized.
#[allow(clippy::too_many_arguments)]
pub fn gptq_layer(
    w: &[f32],
    rows: usize,
    cols: usize,
    x: &[f32],
    m: usize,
    bits: u8,
    group_size: usize,
    damping: f64,
) -> Result<GridCodes> {
    if m == 0 {
        return Err(Error::config("calibration needs at least one row"));
    }
    if x.len() != m * cols {
        return Err(Error::dim(format!("calibration is {} values, expected {m} × {cols}", x.len())));
    }
    let grid = GroupGrid::fit(w, rows, cols, group_size, bits)?;

    let xm = DMatrix::from_fn(m, cols, |t, j| x[t * cols + j] as f64);
    let gram = xm.transpose() * &xm;
    let mut h = gram.clone();
    let mean_diag = h.diagonal().mean();
    for j in 0..cols {
        h[(j, j)] += damping * mean_diag;
    }
    let upper = h
        .cholesky()
        .map(|c| c.inverse())
        .and_then(|hinv| hinv.cholesky())
        .map(|c| c.l().transpose());
    let Some(u) = upper.filter(|u| u.iter().all(|v| v.is_finite())) else {
        log::warn!("Hessian not positive definite; using round-to-nearest");
        let mut out = rtn_layer(w, rows, cols, bits, group_size)?;
        out.fell_back = true;
        return Ok(out);
    };

    let mut work: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let mut codes = vec![0u8; rows * cols];
    for j in 0..cols {
        let d = u[(j, j)];
        for r in 0..rows {
            let v = work[r * cols + j];
            let (c, q) = grid.quantize(r, j, v);
            codes[r * cols + j] = c;
            let err = (v - q) / d;
            let row = &mut work[r * cols..(r + 1) * cols];
            for k in j + 1..cols {
                row[k] -= err * u[(j, k)];
            }
        }
    }

    // Greedy compensation is not guaranteed to beat plain rounding on every
    // row; the output error splits by row, so keep the better code row.
    let rtn = rtn_layer(w, rows, cols, bits, group_size)?;
    let row_error = |codes: &[u8], r: usize| {
        let delta: Vec<f64> = (0..cols)
            .map(|j| w[r * cols + j] as f64 - grid.param(r, j).dequantize_one(codes[r * cols + j] as i32))
            .collect();
        let mut e = 0.0;
        for a in 0..cols {
            let ga: f64 = (0..cols).map(|b| gram[(a, b)] * delta[b]).sum();
            e += delta[a] * ga;
        }
        e
    };
    for r in 0..rows {
        if row_error(&rtn.codes, r) < row_error(&codes, r) {
            codes[r * cols..(r + 1) * cols].copy_from_slice(&rtn.codes[r * cols..(r + 1) * cols]);
        }
    }
    Ok(GridCodes {
        grid,
        codes,
        fell_back: false,
    })
}

/// `‖W X − Ŵ X‖_F` with `x[m × cols]`.
pub fn output_error(w: &[f32], q: &[f32], rows: usize, cols: usize, x: &[f32], m: usize) -> f64 {
    let mut total = 0.0;
    for t in 0..m {
        let xt = &x[t * cols..(t + 1) * cols];
        for r in 0..rows {
            let d: f64 = (0..cols)
                .map(|j| (w[r * cols + j] as f64 - q[r * cols + j] as f64) * xt[j] as f64)
                .sum();
            total += d * d;
        }
    }
    total.sqrt()
}
