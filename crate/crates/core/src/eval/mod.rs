//! Rank-correlation evaluation of a metric against oracle quality labels.

mod kendall;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minimetric::{pack_input, predict_packed, ParamSource, PackedInput};
use crate::synthworld::{LabeledExample, Pair};

pub use kendall::{discordant_pairs, kendall_tau, TauVariant};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    WithReference,
    ReferenceFree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair: Pair,
    pub n: usize,
    pub tau: f64,
    /// `None` when undefined (a constant argument).
    pub tau_b: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: EvalMode,
    pub seeds: Vec<u64>,
    pub pairs: Vec<PairResult>,
    pub average_tau: f64,
    pub average_tau_b: Option<f64>,
    /// Pairs left out for having fewer than two examples.
    pub skipped: Vec<Pair>,
}

/// Predicted scores in data order.
pub fn predict_scores<M: ParamSource<f32> + ?Sized>(
    model: &M,
    data: &[LabeledExample],
    mode: EvalMode,
    batch_size: usize,
) -> Result<Vec<f32>> {
    let packed: Vec<PackedInput> = data
        .iter()
        .map(|ex| {
            let r = (mode == EvalMode::WithReference).then_some(ex.reference.as_slice());
            pack_input(&ex.src, &ex.mt, r, model.config())
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(data.len());
    for chunk in packed.chunks(batch_size.max(1)) {
        out.extend(predict_packed(model, chunk, None)?.into_iter().map(|p| p.score));
    }
    Ok(out)
}

/// Per-pair correlation of `predicted` with the labels of `data`.
pub fn report_from_scores(data: &[LabeledExample], predicted: &[f32], mode: EvalMode, seeds: Vec<u64>) -> Result<EvalReport> {
    if data.len() != predicted.len() {
        return Err(Error::dim("one prediction per example required"));
    }
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for pair in Pair::ALL {
        let (truth, pred): (Vec<f64>, Vec<f64>) = data
            .iter()
            .zip(predicted)
            .filter(|(ex, _)| ex.pair == pair)
            .map(|(ex, &p)| (ex.score as f64, p as f64))
            .unzip();
        match truth.len() {
            0 => continue,
            1 => {
                log::warn!("{pair}: a single example, skipped");
                skipped.push(pair);
                continue;
            }
            _ => {}
        }
        let tau = kendall_tau(&truth, &pred, TauVariant::TieAgree)?;
        let tau_b = match kendall_tau(&truth, &pred, TauVariant::TauB) {
            Ok(t) => Some(t),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        pairs.push(PairResult {
            pair,
            n: truth.len(),
            tau,
            tau_b,
        });
    }
    if pairs.is_empty() {
        return Err(Error::UndefinedCorrelation("no pair has two or more examples".into()));
    }
    let average_tau = pairs.iter().map(|p| p.tau).sum::<f64>() / pairs.len() as f64;
    let average_tau_b = pairs
        .iter()
        .map(|p| p.tau_b)
        .sum::<Option<f64>>()
        .map(|s| s / pairs.len() as f64);
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        mode,
        seeds,
        pairs,
        average_tau,
        average_tau_b,
        skipped,
    })
}

/// Scores every example (withholding the reference in reference-free mode)
/// and correlates with the oracle labels per pair.
pub fn evaluate<M: ParamSource<f32> + ?Sized>(
    model: &M,
    data: &[LabeledExample],
    mode: EvalMode,
    seeds: Vec<u64>,
) -> Result<EvalReport> {
    let predicted = predict_scores(model, data, mode, 64)?;
    report_from_scores(data, &predicted, mode, seeds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpread {
    pub pair: Pair,
    pub mean_tau: f64,
    /// Sample standard deviation (n − 1); 0 for a single run.
    pub std_tau: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAveragedReport {
    pub schema_version: u32,
    pub mode: EvalMode,
    pub seeds: Vec<u64>,
    pub pairs: Vec<PairSpread>,
    pub average_tau: f64,
    pub per_seed_average: Vec<f64>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Elementwise mean of per-pair τ across runs.
pub fn seed_average(reports: &[EvalReport]) -> Result<SeedAveragedReport> {
    let first = reports.first().ok_or_else(|| Error::config("no reports to average"))?;
    let layout: Vec<Pair> = first.pairs.iter().map(|p| p.pair).collect();
    for r in reports {
        if r.pairs.iter().map(|p| p.pair).collect::<Vec<_>>() != layout {
            return Err(Error::config("reports cover different pairs"));
        }
        if r.mode != first.mode {
            return Err(Error::config("reports mix evaluation modes"));
        }
    }
    let pairs: Vec<PairSpread> = layout
        .iter()
        .enumerate()
        .map(|(i, &pair)| {
            let per_seed: Vec<f64> = reports.iter().map(|r| r.pairs[i].tau).collect();
            let (mean_tau, std_tau) = mean_std(&per_seed);
            PairSpread {
                pair,
                mean_tau,
                std_tau,
                per_seed,
            }
        })
        .collect();
    let average_tau = pairs.iter().map(|p| p.mean_tau).sum::<f64>() / pairs.len() as f64;
    Ok(SeedAveragedReport {
        schema_version: SCHEMA_VERSION,
        mode: first.mode,
        seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        pairs,
        average_tau,
        per_seed_average: reports.iter().map(|r| r.average_tau).collect(),
    })
}
