//! Losses, optimizer, schedule and the training loops for distillation and
//! sparse fine-tuning.

mod adamw;
mod gradcheck;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minimetric::{
    backward, pack_input, predict_packed, BatchGrads, Layout, MiniMetricModel, ModelConfig, PackedInput, Tag,
    Targets,
};
use crate::rng::{derive_seed, rng};
use crate::synthworld::LabeledExample;

pub use adamw::AdamW;
pub use gradcheck::{gradient_check, GroupCheck};

/// Examples per gradient work unit. Fixed so results do not depend on the
/// number of workers.
pub const CHUNK: usize = 16;

/// Which parameters receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    All,
    /// Biases, LayerNorm affines, pooling logits and both heads.
    Bitfit,
}

impl Selector {
    pub fn mask(self, layout: &Layout) -> Vec<bool> {
        layout
            .specs
            .iter()
            .map(|s| self == Selector::All || s.role.in_bitfit_set())
            .collect()
    }
}

/// Whether training inputs carry the reference segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefMode {
    With,
    Without,
    /// Each example drops its reference with probability one half (seeded).
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    pub selector: Selector,
    pub reference: RefMode,
    pub workers: usize,
}

impl TrainConfig {
    /// Published distillation settings: head 2e-5, encoder 1e-5, batch 64, one epoch.
    pub fn distill_published() -> Self {
        Self {
            lr_encoder: 1e-5,
            lr_head: 2e-5,
            batch_size: 64,
            epochs: 1,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            lambda: 1.0,
            seed: 0,
            selector: Selector::All,
            reference: RefMode::With,
            workers: 1,
        }
    }

    /// Rates that train a from-scratch toy student within one epoch.
    pub fn distill_desk() -> Self {
        Self {
            lr_encoder: 1e-3,
            lr_head: 2e-3,
            ..Self::distill_published()
        }
    }

    /// Sparse fine-tuning: lr 1e-4, batch 128, 10% warmup, one epoch.
    pub fn finetune() -> Self {
        Self {
            lr_encoder: 1e-4,
            lr_head: 1e-4,
            batch_size: 128,
            epochs: 1,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            lambda: 1.0,
            seed: 0,
            selector: Selector::Bitfit,
            reference: RefMode::With,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config(format!("warmup fraction {} outside [0,1)", self.warmup_frac)));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.workers == 0 {
            return Err(Error::config("batch size, epochs and workers must be at least 1"));
        }
        if !(self.lr_encoder >= 0.0 && self.lr_head >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("learning rates and weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Loss of one prediction: `(q − q*)² + λ · mean_t CE(p_t, tag*_t)`.
pub fn loss(q_pred: f64, q_target: f64, tag_probs: &[[f32; 4]], tags: &[Tag], lambda: f64) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::config(format!("lambda {lambda} must be non-negative")));
    }
    if tag_probs.len() != tags.len() {
        return Err(Error::dim(format!("{} tag distributions for {} tags", tag_probs.len(), tags.len())));
    }
    let sq = (q_pred - q_target).powi(2);
    if tags.is_empty() || lambda == 0.0 {
        return Ok(sq);
    }
    let ce: f64 = tag_probs
        .iter()
        .zip(tags)
        .map(|(p, t)| -(p[t.index()] as f64).max(1e-30).ln())
        .sum();
    Ok(sq + lambda * ce / tags.len() as f64)
}

/// Linear warmup to `peak` over `⌊warmup_frac · total⌋` steps, then cosine decay to 0.
pub fn lr_schedule(step: usize, total: usize, warmup_frac: f64, peak: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if step > total {
        return Err(Error::config(format!("step {step} beyond {total}")));
    }
    let warm = (warmup_frac * total as f64).floor() as usize;
    if step < warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    let span = (total - warm).max(1) as f64;
    let progress = (step - warm) as f64 / span;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub loss: f64,
    pub score_loss: f64,
    pub tag_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Mean batch loss per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.records.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.records.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }
}

/// A training example packed for the model.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub input: PackedInput,
    pub score: f32,
    pub tags: Vec<Tag>,
}

/// Packs labeled examples; tags are cut to the packed translation span.
pub fn prepare(
    examples: &[LabeledExample],
    config: &ModelConfig,
    mode: RefMode,
    seed: u64,
) -> Result<Vec<TrainItem>> {
    let mut r = rng(derive_seed(seed, 0x0072_6566));
    examples
        .iter()
        .map(|ex| {
            let with_ref = match mode {
                RefMode::With => true,
                RefMode::Without => false,
                RefMode::Mixed => rand::Rng::random_bool(&mut r, 0.5),
            };
            let input = pack_input(&ex.src, &ex.mt, with_ref.then_some(ex.reference.as_slice()), config)?;
            let tags = ex.tags[..input.mt_span.len()].to_vec();
            Ok(TrainItem {
                input,
                score: ex.score,
                tags,
            })
        })
        .collect()
}

/// Gradients of the mean loss over `items`, computed in fixed chunks and
/// reduced pairwise so the result is independent of `workers`.
pub fn batch_gradients(
    model: &MiniMetricModel,
    items: &[&TrainItem],
    lambda: f32,
    selected: &[bool],
    workers: usize,
) -> Result<BatchGrads<f32>> {
    if items.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let weight = 1.0 / items.len() as f32;
    let chunks: Vec<&[&TrainItem]> = items.chunks(CHUNK).collect();
    let run = |chunk: &[&TrainItem]| -> Result<BatchGrads<f32>> {
        let inputs: Vec<PackedInput> = chunk.iter().map(|it| it.input.clone()).collect();
        let scores: Vec<f32> = chunk.iter().map(|it| it.score).collect();
        let tags: Vec<&[Tag]> = chunk.iter().map(|it| it.tags.as_slice()).collect();
        let targets = Targets {
            scores: &scores,
            tags: &tags,
            lambda,
            weight,
        };
        backward(model, &inputs, &targets, selected)
    };
    let parts: Vec<BatchGrads<f32>> = if workers > 1 && chunks.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            chunks.par_iter().map(|c| run(c)).collect::<Result<Vec<_>>>()
        })?
    } else {
        chunks.iter().map(|c| run(c)).collect::<Result<Vec<_>>>()?
    };
    Ok(reduce_pairwise(parts))
}

fn reduce_pairwise(mut parts: Vec<BatchGrads<f32>>) -> BatchGrads<f32> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.add(&b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().expect("at least one part")
}

/// Trains `model` in place and returns the per-step log.
pub fn train(model: &mut MiniMetricModel, examples: &[LabeledExample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::config("training data is empty"));
    }
    let items = prepare(examples, model.config(), cfg.reference, cfg.seed)?;
    let selected = cfg.selector.mask(model.layout());
    let is_head: Vec<bool> = model.layout().specs.iter().map(|s| s.role.is_head()).collect();
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::for_params(model.params(), cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng(derive_seed(cfg.seed, epoch as u64)));
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&TrainItem> = batch.iter().map(|&i| &items[i]).collect();
            let g = batch_gradients(model, &refs, cfg.lambda as f32, &selected, cfg.workers)?;
            // rate for the update that completes step + 1
            let lr_enc = lr_schedule(step + 1, total, cfg.warmup_frac, cfg.lr_encoder)?;
            let lr_head = lr_schedule(step + 1, total, cfg.warmup_frac, cfg.lr_head)?;
            let lrs: Vec<f64> = is_head.iter().map(|&h| if h { lr_head } else { lr_enc }).collect();
            let mut views: Vec<&mut [f32]> = model.params_mut().iter_mut().map(|t| t.data_mut()).collect();
            opt.step(&mut views, &g.grads, &lrs);
            log.records.push(LogRecord {
                step,
                epoch,
                lr_encoder: lr_enc,
                lr_head,
                loss: g.loss as f64,
                score_loss: g.score_loss as f64,
                tag_loss: g.tag_loss as f64,
            });
            step += 1;
        }
    }
    if !model.params().iter().all(|t| t.is_finite()) {
        return Err(Error::Pipeline("training diverged to non-finite parameters".into()));
    }
    Ok(log)
}

/// Updates only the BitFit set; every other parameter keeps its exact bits.
pub fn bitfit_finetune(
    model: &MiniMetricModel,
    examples: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<(MiniMetricModel, TrainLog)> {
    let cfg = TrainConfig {
        selector: Selector::Bitfit,
        ..cfg.clone()
    };
    let mut out = model.clone();
    let log = train(&mut out, examples, &cfg)?;
    Ok((out, log))
}

/// Trains a fresh student, initialized from `cfg.seed`, on oracle labels.
pub fn distill(
    student: &ModelConfig,
    examples: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<(MiniMetricModel, TrainLog)> {
    if examples.is_empty() {
        return Err(Error::config("distillation corpus is empty"));
    }
    let mut model = MiniMetricModel::init(ModelConfig {
        init_seed: cfg.seed,
        ..student.clone()
    })?;
    let log = train(&mut model, examples, cfg)?;
    Ok((model, log))
}

/// Mean loss over a data set without updating the model.
pub fn mean_loss(model: &MiniMetricModel, examples: &[LabeledExample], cfg: &TrainConfig) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::config("no examples"));
    }
    let items = prepare(examples, model.config(), cfg.reference, cfg.seed)?;
    let mut total = 0.0;
    for chunk in items.chunks(64) {
        let inputs: Vec<PackedInput> = chunk.iter().map(|it| it.input.clone()).collect();
        for (p, it) in predict_packed(model, &inputs, None)?.iter().zip(chunk) {
            total += loss(p.score as f64, it.score as f64, &p.tags, &it.tags, cfg.lambda)?;
        }
    }
    Ok(total / items.len() as f64)
}
