//! Weight pruning (magnitude and Wanda scores, unstructured and N:M masks) and
//! tail-layer dropping.

mod layers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use layers::{drop_layers, retained_layers, DropReport};

use crate::error::{Error, Result};
use crate::minimetric::{forward, ForwardOptions, MiniMetricModel, PackedInput, ParamRole, ParamSource};
use crate::quantize::round_half_away;

/// Calibration sequences per forward pass while collecting norms.
const NORM_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SparsityPattern {
    Unstructured { fraction: f64 },
    /// Keep `keep` of every `group` consecutive weights in a row.
    Structured { keep: usize, group: usize },
}

impl SparsityPattern {
    pub const TWO_FOUR: Self = Self::Structured { keep: 2, group: 4 };
    pub const FOUR_EIGHT: Self = Self::Structured { keep: 4, group: 8 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Unstructured { fraction } if fraction > 0.0 && fraction < 1.0 => Ok(()),
            Self::Unstructured { fraction } => {
                Err(Error::config(format!("sparsity fraction {fraction} outside (0, 1)")))
            }
            Self::Structured { keep: 2, group: 4 } | Self::Structured { keep: 4, group: 8 } => Ok(()),
            Self::Structured { keep, group } => Err(Error::config(format!("unsupported pattern {keep}:{group}"))),
        }
    }
}

impl fmt::Display for SparsityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Unstructured { fraction } => write!(f, "unstructured:{fraction}"),
            Self::Structured { keep, group } => write!(f, "{keep}:{group}"),
        }
    }
}

impl FromStr for SparsityPattern {
    type Err = Error;

    /// Accepts `2:4`, `4:8`, `unstructured` (half) or `unstructured:<fraction>`.
    fn from_str(s: &str) -> Result<Self> {
        let p = match s {
            "2:4" => Self::TWO_FOUR,
            "4:8" => Self::FOUR_EIGHT,
            "unstructured" => Self::Unstructured { fraction: 0.5 },
            _ => {
                let frac = s
                    .strip_prefix("unstructured:")
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| Error::config(format!("unknown sparsity pattern '{s}'")))?;
                Self::Unstructured { fraction: frac }
            }
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Magnitude,
    Wanda,
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Self::Magnitude),
            "wanda" => Ok(Self::Wanda),
            _ => Err(Error::config(format!("unknown pruning method '{s}'"))),
        }
    }
}

pub fn magnitude_scores(w: &[f32]) -> Vec<f32> {
    w.iter().map(|v| v.abs()).collect()
}

/// `|W_ij| · norm_j` for a row-major `[rows × norms.len()]` matrix.
pub fn wanda_scores(w: &[f32], norms: &[f32]) -> Result<Vec<f32>> {
    if norms.is_empty() || !w.len().is_multiple_of(norms.len()) {
        return Err(Error::dim(format!(
            "{} weights do not split into rows of {} features",
            w.len(),
            norms.len()
        )));
    }
    Ok(w.chunks_exact(norms.len())
        .flat_map(|row| row.iter().zip(norms).map(|(v, n)| v.abs() * n))
        .collect())
}

/// Per-feature input norms of every weight matrix the forward pass feeds.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorms {
    /// Indexed by parameter; `None` for parameters without a matrix input.
    pub per_param: Vec<Option<Vec<f32>>>,
    /// Activation rows seen per encoder matrix.
    pub tokens: usize,
    /// Set when every norm of some matrix is zero, which makes Wanda scores all zero.
    pub degenerate: bool,
}

/// `norm_j = sqrt(Σ_t x_tj²) / N` over all `N` calibration activation rows.
pub fn collect_feature_norms<M: ParamSource<f32> + ?Sized>(
    model: &M,
    calib: &[PackedInput],
) -> Result<FeatureNorms> {
    if calib.is_empty() {
        return Err(Error::config("feature norms need calibration sequences"));
    }
    let n_params = model.layout().len();
    let mut sums: Vec<Option<Vec<f64>>> = vec![None; n_params];
    let mut rows = vec![0usize; n_params];
    for chunk in calib.chunks(NORM_CHUNK) {
        let fw = forward(model, chunk, &ForwardOptions { keep_cache: true, tracker: None })?;
        let cache = fw.cache.expect("cache kept");
        for li in cache.linear_inputs(model.layout()) {
            let acc = sums[li.param].get_or_insert_with(|| vec![0.0; li.cols]);
            for row in li.data.chunks_exact(li.cols) {
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a += x as f64 * x as f64;
                }
            }
            rows[li.param] += li.rows;
        }
    }
    let per_param: Vec<Option<Vec<f32>>> = sums
        .into_iter()
        .zip(&rows)
        .map(|(s, &n)| s.map(|s| s.iter().map(|v| (v.sqrt() / n as f64) as f32).collect()))
        .collect();
    let degenerate = per_param.iter().flatten().any(|n| n.iter().all(|&v| v == 0.0));
    if degenerate {
        log::warn!("some feature norms are all zero; Wanda scores degenerate to zero");
    }
    let tokens = model
        .layout()
        .layers
        .first()
        .map_or(0, |l| rows[l.wq]);
    Ok(FeatureNorms {
        per_param,
        tokens,
        degenerate,
    })
}

/// Outcome of masking one matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub zeros: usize,
    pub total: usize,
    /// A row length not divisible by the group size left a shorter final group.
    pub ragged: bool,
}

impl MaskStats {
    pub fn zero_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.zeros as f64 / self.total as f64
        }
    }
}

/// Ascending by score; equal scores put the lower index first, so it is pruned first.
fn lowest(scores: &[f32], idx: &mut Vec<usize>, count: usize) {
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(count);
}

/// Pruning mask (`true` = kept) of a `[rows × cols]` score matrix.
pub fn sparsity_mask(scores: &[f32], cols: usize, pattern: SparsityPattern) -> Result<(Vec<bool>, bool)> {
    pattern.validate()?;
    if cols == 0 || !scores.len().is_multiple_of(cols) {
        return Err(Error::dim("scores do not form whole rows"));
    }
    let mut keep = vec![true; scores.len()];
    let mut ragged = false;
    match pattern {
        SparsityPattern::Unstructured { fraction } => {
            let count = round_half_away(fraction * scores.len() as f64) as usize;
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            lowest(scores, &mut idx, count);
            for i in idx {
                keep[i] = false;
            }
        }
        SparsityPattern::Structured { keep: n_keep, group } => {
            for row_start in (0..scores.len()).step_by(cols) {
                for g_start in (row_start..row_start + cols).step_by(group) {
                    let g_len = group.min(row_start + cols - g_start);
                    let prune = if g_len == group {
                        group - n_keep
                    } else {
                        ragged = true;
                        g_len / 2
                    };
                    let mut idx: Vec<usize> = (g_start..g_start + g_len).collect();
                    lowest(scores, &mut idx, prune);
                    for i in idx {
                        keep[i] = false;
                    }
                }
            }
        }
    }
    Ok((keep, ragged))
}

/// Zeroes the lowest-scoring weights of `w` in place.
pub fn apply_sparsity(w: &mut [f32], scores: &[f32], cols: usize, pattern: SparsityPattern) -> Result<MaskStats> {
    if scores.len() != w.len() {
        return Err(Error::dim(format!("{} scores for {} weights", scores.len(), w.len())));
    }
    let (keep, ragged) = sparsity_mask(scores, cols, pattern)?;
    if ragged {
        log::warn!("row length {cols} not divisible by the group size; final groups keep the larger half");
    }
    for (v, k) in w.iter_mut().zip(&keep) {
        if !k {
            *v = 0.0;
        }
    }
    Ok(MaskStats {
        zeros: w.iter().filter(|v| **v == 0.0).count(),
        total: w.len(),
        ragged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub zero_fraction: f64,
    pub ragged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: Option<ScoreMethod>,
    pub pattern: Option<SparsityPattern>,
    pub layers: Vec<LayerSparsity>,
    /// Encoder layers kept, 0-indexed into the original model.
    pub retained_layers: Vec<usize>,
    /// Original pooling-logit index for each logit of the pruned model.
    pub pooling_remap: Vec<usize>,
    pub degenerate_norms: bool,
}

/// Prunes every encoder projection matrix with the given scores and pattern.
///
/// Wanda needs calibration sequences to measure input feature norms.
pub fn prune_weights(
    model: &MiniMetricModel,
    method: ScoreMethod,
    pattern: SparsityPattern,
    calib: Option<&[PackedInput]>,
) -> Result<(MiniMetricModel, PruneReport)> {
    pattern.validate()?;
    let norms = match (method, calib) {
        (ScoreMethod::Wanda, None) => return Err(Error::config("wanda needs a calibration batch")),
        (ScoreMethod::Wanda, Some(c)) => Some(collect_feature_norms(model, c)?),
        (ScoreMethod::Magnitude, _) => None,
    };
    let layout = model.layout().clone();
    let mut out = model.clone();
    let mut layers = Vec::new();
    for (idx, spec) in layout.specs.iter().enumerate() {
        if spec.role != ParamRole::Linear {
            continue;
        }
        let cols = spec.shape[1];
        let w = out.params_mut()[idx].data_mut();
        let scores = match &norms {
            None => magnitude_scores(w),
            Some(n) => {
                let col_norms = n.per_param[idx]
                    .as_deref()
                    .ok_or_else(|| Error::config(format!("no calibration norms for {}", spec.name)))?;
                wanda_scores(w, col_norms)?
            }
        };
        let stats = apply_sparsity(w, &scores, cols, pattern)?;
        layers.push(LayerSparsity {
            name: spec.name.clone(),
            zero_fraction: stats.zero_fraction(),
            ragged: stats.ragged,
        });
    }
    let l = model.config().num_layers;
    let report = PruneReport {
        method: Some(method),
        pattern: Some(pattern),
        layers,
        retained_layers: (0..l).collect(),
        pooling_remap: (0..=l).collect(),
        degenerate_norms: norms.is_some_and(|n| n.degenerate),
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magnitude_examples() {
        assert_eq!(magnitude_scores(&[-2.0, 1.0]), vec![2.0, 1.0]);
        assert_eq!(magnitude_scores(&[0.0; 3]), vec![0.0; 3]);
        assert_eq!(magnitude_scores(&[3.0, -0.5]), magnitude_scores(&[-3.0, 0.5]));
    }

    #[test]
    fn wanda_diverges_from_magnitude() {
        let s = wanda_scores(&[1.0, -2.0], &[3.0, 1.0]).unwrap();
        assert_eq!(s, vec![3.0, 2.0]);
        let mut w = [1.0f32, -2.0];
        apply_sparsity(&mut w, &s, 2, SparsityPattern::Unstructured { fraction: 0.5 }).unwrap();
        assert_eq!(w, [1.0, 0.0]);
        assert!(wanda_scores(&[1.0, 2.0, 3.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn zero_norm_column_goes_first() {
        let w = [5.0f32, 0.1, 4.0, 0.2];
        let s = wanda_scores(&w, &[0.0, 1.0]).unwrap();
        let (keep, _) = sparsity_mask(&s, 2, SparsityPattern::Unstructured { fraction: 0.5 }).unwrap();
        assert_eq!(keep, vec![false, true, false, true]);
    }

    #[test]
    fn two_four_example() {
        let mut w = [0.1f32, -0.5, 0.3, 0.05];
        let s = magnitude_scores(&w);
        let stats = apply_sparsity(&mut w, &s, 4, SparsityPattern::TWO_FOUR).unwrap();
        assert_eq!(w, [0.0, -0.5, 0.3, 0.0]);
        assert_eq!(stats.zero_fraction(), 0.5);
    }

    #[test]
    fn ties_prune_lower_index() {
        let (keep, _) = sparsity_mask(&[1.0; 4], 4, SparsityPattern::TWO_FOUR).unwrap();
        assert_eq!(keep, vec![false, false, true, true]);
        let (keep, _) = sparsity_mask(&[1.0; 4], 4, SparsityPattern::Unstructured { fraction: 0.25 }).unwrap();
        assert_eq!(keep, vec![false, true, true, true]);
    }

    #[test]
    fn ragged_group_keeps_larger_half() {
        let s: Vec<f32> = (1..=7).map(|v| v as f32).collect();
        let (keep, ragged) = sparsity_mask(&s, 7, SparsityPattern::TWO_FOUR).unwrap();
        assert!(ragged);
        assert_eq!(keep, vec![false, false, true, true, false, true, true]);
    }

    #[test]
    fn unstructured_count_rounds_half_away() {
        // 0.5 · 5 = 2.5 → 3 pruned.
        let (keep, _) = sparsity_mask(&[1.0, 2.0, 3.0, 4.0, 5.0], 5, SparsityPattern::Unstructured { fraction: 0.5 })
            .unwrap();
        assert_eq!(keep.iter().filter(|k| !**k).count(), 3);
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!("2:4".parse::<SparsityPattern>().unwrap(), SparsityPattern::TWO_FOUR);
        assert_eq!("4:8".parse::<SparsityPattern>().unwrap(), SparsityPattern::FOUR_EIGHT);
        assert_eq!(
            "unstructured:0.3".parse::<SparsityPattern>().unwrap(),
            SparsityPattern::Unstructured { fraction: 0.3 }
        );
        assert!("3:4".parse::<SparsityPattern>().is_err());
        assert!("unstructured:1.0".parse::<SparsityPattern>().is_err());
        assert!(SparsityPattern::Structured { keep: 1, group: 4 }.validate().is_err());
    }
}
