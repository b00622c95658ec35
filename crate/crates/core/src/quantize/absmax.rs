use super::affine::round_half_away;
use crate::error::{Error, Result};

pub const OUTLIER_THRESHOLD: f32 = 6.0;

/// Signed 8-bit per-row absmax quantization with float outlier columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Absmax8 {
    pub rows: usize,
    pub cols: usize,
    /// Sorted columns kept in float.
    pub outlier_cols: Vec<u32>,
    /// `rows × outlier_cols.len()` float values.
    pub outliers: Vec<f32>,
    /// `rows × (cols − outliers)` codes.
    pub codes: Vec<i8>,
    /// Per-row `max|row| / 127`; 0 for an all-zero row.
    pub scales: Vec<f32>,
    /// Set when every column is an outlier.
    pub all_outliers: bool,
}

/// Columns whose calibration maximum exceeds `threshold`.
pub fn outlier_columns(feature_max: &[f32], threshold: f32) -> Vec<u32> {
    (0..feature_max.len() as u32).filter(|&j| feature_max[j as usize] > threshold).collect()
}

pub fn absmax_int8(
    w: &[f32],
    rows: usize,
    cols: usize,
    feature_max: Option<&[f32]>,
    threshold: f32,
) -> Result<Absmax8> {
    if w.len() != rows * cols {
        return Err(Error::dim("weight length disagrees with shape"));
    }
    let outlier_cols = match feature_max {
        Some(m) if m.len() != cols => {
            return Err(Error::dim(format!("{} feature maxima for {cols} columns", m.len())))
        }
        Some(m) => outlier_columns(m, threshold),
        None => Vec::new(),
    };
    let mut is_out = vec![false; cols];
    for &j in &outlier_cols {
        is_out[j as usize] = true;
    }
    let all_outliers = cols > 0 && outlier_cols.len() == cols;
    if all_outliers {
        log::warn!("every column is an outlier; nothing left to quantize");
    }
    let mut outliers = Vec::with_capacity(rows * outlier_cols.len());
    let mut codes = Vec::with_capacity(rows * (cols - outlier_cols.len()));
    let mut scales = Vec::with_capacity(rows);
    for row in w.chunks_exact(cols) {
        outliers.extend(outlier_cols.iter().map(|&j| row[j as usize]));
        let amax = row
            .iter()
            .zip(&is_out)
            .filter(|(_, &o)| !o)
            .fold(0.0f32, |m, (v, _)| m.max(v.abs()));
        let scale = amax as f64 / 127.0;
        scales.push(scale as f32);
        for (v, _) in row.iter().zip(&is_out).filter(|(_, &o)| !o) {
            let c = if scale == 0.0 { 0.0 } else { round_half_away(*v as f64 / scale) };
            codes.push(c.clamp(-127.0, 127.0) as i8);
        }
    }
    Ok(Absmax8 {
        rows,
        cols,
        outlier_cols,
        outliers,
        codes,
        scales,
        all_outliers,
    })
}

impl Absmax8 {
    pub fn dequantize_rows(&self, rows: &[usize]) -> Vec<f32> {
        let n_out = self.outlier_cols.len();
        let n_q = self.cols - n_out;
        let mut out = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            let (mut qi, mut oi) = (0, 0);
            let scale = self.scales[r];
            for j in 0..self.cols {
                if oi < n_out && self.outlier_cols[oi] as usize == j {
                    out.push(self.outliers[r * n_out + oi]);
                    oi += 1;
                } else {
                    out.push(scale * self.codes[r * n_q + qi] as f32);
                    qi += 1;
                }
            }
        }
        out
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.dequantize_rows(&(0..self.rows).collect::<Vec<_>>())
    }
}
