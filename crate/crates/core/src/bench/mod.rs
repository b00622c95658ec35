//! Efficiency harness: batch-size search, throughput, tracked peak memory
//! and the energy/carbon cost estimator.

mod cost;
mod memory;

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use cost::{
    estimate_cost, footnote_discrepancy_note, CostEstimate, FOOTNOTE_EXAMPLES, FOOTNOTE_KG_PER_KWH,
    FOOTNOTE_SEC_PER_EXAMPLE, FOOTNOTE_STATED, FOOTNOTE_WATTS,
};
pub use memory::MemTracker;

use crate::error::{Error, Result};
use crate::minimetric::{predict_packed, PackedInput, ParamSource, CLS, NUM_SPECIAL, SEP};
use crate::synthworld::Pair;

pub const PEAK_BATCH: usize = 8;
pub const DEFAULT_CEILING: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxBatch {
    pub batch: usize,
    /// The search stopped at the ceiling rather than at the cap.
    pub hit_ceiling: bool,
}

/// A sequence filling `max_seq_len`, the worst case for activation memory.
fn full_length_input(max_seq_len: usize, vocab: usize) -> PackedInput {
    let mut ids: Vec<u32> = (0..max_seq_len)
        .map(|i| (NUM_SPECIAL + i % (vocab - NUM_SPECIAL)) as u32)
        .collect();
    ids[0] = CLS;
    let mid = max_seq_len / 2;
    ids[mid] = SEP;
    ids[max_seq_len - 1] = SEP;
    PackedInput {
        ids,
        mt_span: 1..mid,
    }
}

/// Tracked high-water mark of one forward pass over `batch`, weights included.
pub fn tracked_peak<M: ParamSource<f32> + ?Sized>(model: &M, batch: &[PackedInput]) -> Result<usize> {
    let tracker = MemTracker::new();
    let resident = model.resident_bytes();
    tracker.alloc(resident);
    if !batch.is_empty() {
        predict_packed(model, batch, Some(&tracker))?;
    }
    tracker.free(resident);
    Ok(tracker.peak())
}

/// Largest power-of-two batch of full-length sequences whose tracked peak
/// fits in `cap_bytes`, searching no further than `ceiling`.
pub fn find_max_batch<M: ParamSource<f32> + ?Sized>(model: &M, cap_bytes: u64, ceiling: usize) -> Result<MaxBatch> {
    if ceiling == 0 {
        return Err(Error::config("search ceiling must be positive"));
    }
    if cap_bytes <= model.resident_bytes() as u64 {
        return Err(Error::Capacity(format!(
            "cap of {cap_bytes} bytes does not exceed the {} resident model bytes",
            model.resident_bytes()
        )));
    }
    let cfg = model.config();
    let one = full_length_input(cfg.max_seq_len, cfg.vocab_size);
    let fits = |b: usize| -> Result<bool> {
        let batch = vec![one.clone(); b];
        Ok(tracked_peak(model, &batch)? as u64 <= cap_bytes)
    };
    if !fits(1)? {
        return Err(Error::Capacity(format!("batch 1 exceeds the cap of {cap_bytes} bytes")));
    }
    let mut best = 1;
    while best * 2 <= ceiling {
        if !fits(best * 2)? {
            return Ok(MaxBatch {
                batch: best,
                hit_ceiling: false,
            });
        }
        best *= 2;
    }
    Ok(MaxBatch {
        batch: best,
        hit_ceiling: true,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub per_pair: Vec<(Pair, f64)>,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
}

impl Spread {
    pub fn new(per_pair: Vec<(Pair, f64)>) -> Result<Self> {
        if per_pair.is_empty() {
            return Err(Error::config("no pairs to summarize"));
        }
        let mut v: Vec<f64> = per_pair.iter().map(|p| p.1).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        Ok(Self {
            min: v[0],
            median,
            max: v[n - 1],
            mean: v.iter().sum::<f64>() / n as f64,
            per_pair,
        })
    }
}

/// Samples per second on each pair's set: one untimed warmup batch, then the
/// whole set timed end to end.
pub fn measure_throughput<M: ParamSource<f32> + ?Sized>(
    model: &M,
    sets: &[(Pair, Vec<PackedInput>)],
    batch: usize,
) -> Result<Spread> {
    if batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut rates = Vec::with_capacity(sets.len());
    for (pair, inputs) in sets {
        if inputs.is_empty() {
            return Err(Error::config(format!("{pair} set is empty")));
        }
        predict_packed(model, &inputs[..batch.min(inputs.len())], None)?;
        let start = Instant::now();
        for chunk in inputs.chunks(batch) {
            predict_packed(model, chunk, None)?;
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        rates.push((*pair, inputs.len() as f64 / secs));
    }
    Spread::new(rates)
}

/// Peak tracked bytes of an evaluation pass over each pair's set.
///
/// Accounting is done by the library's own [`MemTracker`]; without one there
/// is nothing to measure.
pub fn peak_memory<M: ParamSource<f32> + ?Sized>(
    model: &M,
    sets: &[(Pair, Vec<PackedInput>)],
    batch: usize,
    tracker: Option<&MemTracker>,
) -> Result<Spread> {
    let tracker = tracker.ok_or_else(|| Error::config("peak memory needs an allocation tracker"))?;
    if batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let resident = model.resident_bytes();
    let mut peaks = Vec::with_capacity(sets.len());
    for (pair, inputs) in sets {
        let base = tracker.live();
        tracker.reset_peak();
        tracker.alloc(resident);
        for chunk in inputs.chunks(batch) {
            predict_packed(model, chunk, Some(tracker))?;
        }
        tracker.free(resident);
        peaks.push((*pair, (tracker.peak() - base) as f64));
    }
    Spread::new(peaks)
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub fn device_label() -> String {
    format!("cpu-{}-{}", std::env::consts::ARCH, std::env::consts::OS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub max_batch: Option<MaxBatch>,
    pub batch: usize,
    /// Samples per second.
    pub throughput: Spread,
    /// Tracked bytes at batch [`PEAK_BATCH`].
    pub peak_bytes: Spread,
    pub resident_bytes: usize,
    pub device: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

/// Full efficiency run: optional batch search, throughput at `batch` (or the
/// batch found), and peak memory at batch 8.
pub fn run_bench<M: ParamSource<f32> + ?Sized>(
    model: &M,
    sets: &[(Pair, Vec<PackedInput>)],
    batch: Option<usize>,
    memory_cap: Option<u64>,
    ceiling: usize,
) -> Result<BenchReport> {
    let started_unix = unix_now();
    let max_batch = memory_cap.map(|cap| find_max_batch(model, cap, ceiling)).transpose()?;
    let batch = batch.or(max_batch.map(|m| m.batch)).unwrap_or(PEAK_BATCH);
    let throughput = measure_throughput(model, sets, batch)?;
    let tracker = MemTracker::new();
    let peak_bytes = peak_memory(model, sets, PEAK_BATCH, Some(&tracker))?;
    Ok(BenchReport {
        max_batch,
        batch,
        throughput,
        peak_bytes,
        resident_bytes: model.resident_bytes(),
        device: device_label(),
        started_unix,
        finished_unix: unix_now(),
    })
}
