use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauVariant {
    /// `1 − 4·n_d / (n(n−1))`: tied pairs count as agreeing.
    #[default]
    TieAgree,
    /// Tie-corrected tau-b.
    TauB,
}

/// Counts strictly decreasing pairs `i < j, v[i] > v[j]` by merge sort.
fn inversions(v: &mut [f64], scratch: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = inversions(&mut v[..mid], scratch) + inversions(&mut v[mid..], scratch);
    scratch.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            scratch.push(v[i]);
            i += 1;
        } else {
            count += (mid - i) as u64;
            scratch.push(v[j]);
            j += 1;
        }
    }
    scratch.extend_from_slice(&v[i..mid]);
    scratch.extend_from_slice(&v[j..n]);
    v.copy_from_slice(scratch);
    count
}

/// Σ t(t−1)/2 over runs of equal keys in an already sorted sequence.
fn tied_pairs<K: PartialEq>(sorted: impl Iterator<Item = K>) -> u64 {
    let mut total = 0;
    let mut run = 0u64;
    let mut prev: Option<K> = None;
    for k in sorted {
        if prev.as_ref() == Some(&k) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(k);
    }
    total + run * (run + 1) / 2
}

/// Number of discordant pairs; ties in either argument are not discordant.
pub fn discordant_pairs(x: &[f64], y: &[f64]) -> u64 {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    inversions(&mut ys, &mut Vec::with_capacity(x.len()))
}

/// Kendall rank correlation in `O(n log n)`.
pub fn kendall_tau(x: &[f64], y: &[f64], variant: TauVariant) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(format!("{} vs {} scores", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::UndefinedCorrelation(format!("needs at least 2 pairs, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidExample("non-finite score".into()));
    }
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let nd = discordant_pairs(x, y);
    match variant {
        TauVariant::TieAgree => Ok((n0 as f64 - 2.0 * nd as f64) / n0 as f64),
        TauVariant::TauB => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
            let n1 = tied_pairs(idx.iter().map(|&i| x[i].to_bits()));
            let n3 = tied_pairs(idx.iter().map(|&i| (x[i].to_bits(), y[i].to_bits())));
            let mut ys: Vec<f64> = y.to_vec();
            ys.sort_by(f64::total_cmp);
            let n2 = tied_pairs(ys.iter().map(|v| v.to_bits()));
            let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
            if denom == 0.0 {
                return Err(Error::UndefinedCorrelation("one argument is constant".into()));
            }
            let concordant_minus_discordant = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * nd as f64;
            Ok(concordant_minus_discordant / denom)
        }
    }
}
