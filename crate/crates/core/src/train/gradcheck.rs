use rand::Rng;

use crate::error::Result;
use crate::minimetric::{backward, forward, ForwardOptions, MiniMetricModel, PackedInput, Shadow, Tag, Targets};
use crate::rng::rng;

const STEP: f64 = 1e-3;

/// Worst agreement between reverse-mode and finite-difference gradients
/// within one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
}

pub fn param_group(name: &str) -> &'static str {
    if name.ends_with("_emb") {
        "embeddings"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.contains(".ffn.") {
        "ffn"
    } else if name.contains("ln") {
        "layernorm"
    } else if name.starts_with("pool.logits") {
        "pooling"
    } else if name.starts_with("score.") {
        "score-head"
    } else if name.starts_with("tag.") {
        "tag-head"
    } else {
        "other"
    }
}

fn batch_loss(model: &Shadow<f64>, batch: &[PackedInput], targets: &Targets<'_, f64>) -> Result<f64> {
    let out = forward(
        model,
        batch,
        &ForwardOptions {
            keep_cache: false,
            tracker: None,
        },
    )?
    .outputs;
    let mut total = 0.0;
    for (i, (q, probs)) in out.scores.iter().zip(&out.tag_probs).enumerate() {
        total += (q - targets.scores[i]).powi(2);
        if !probs.is_empty() {
            let ce: f64 = probs
                .iter()
                .zip(targets.tags[i])
                .map(|(p, t)| -p[t.index()].max(1e-30).ln())
                .sum();
            total += targets.lambda * ce / probs.len() as f64;
        }
    }
    Ok(total * targets.weight)
}

/// Compares the 64-bit reverse-mode gradient of the mean batch loss with
/// central differences (step 1e-3) on `per_param` coordinates of every
/// parameter: half the largest-gradient entries, half chosen at random.
///
/// Relative error is `|a − f| / max(|a|, |f|, floor)`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &MiniMetricModel,
    batch: &[PackedInput],
    scores: &[f64],
    tags: &[&[Tag]],
    lambda: f64,
    per_param: usize,
    floor: f64,
    seed: u64,
) -> Result<Vec<GroupCheck>> {
    let mut shadow = model.shadow::<f64>();
    let targets = Targets {
        scores,
        tags,
        lambda,
        weight: 1.0 / batch.len() as f64,
    };
    let selected = vec![true; shadow.layout.len()];
    let analytic = backward(&shadow, batch, &targets, &selected)?.grads;
    let mut r = rng(seed);
    let mut groups: Vec<GroupCheck> = Vec::new();
    for (idx, spec) in shadow.layout.specs.clone().iter().enumerate() {
        let g = &analytic[idx];
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        let mut coords: Vec<usize> = order.iter().take(per_param / 2).copied().collect();
        while coords.len() < per_param.min(g.len()) {
            let c = r.random_range(0..g.len());
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let orig = shadow.params[idx][c];
            shadow.params[idx][c] = orig + STEP;
            let up = batch_loss(&shadow, batch, &targets)?;
            shadow.params[idx][c] = orig - STEP;
            let down = batch_loss(&shadow, batch, &targets)?;
            shadow.params[idx][c] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let a = g[c];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
        }
        let name = param_group(&spec.name);
        match groups.iter_mut().find(|gc| gc.group == name) {
            Some(gc) => {
                gc.checked += coords.len();
                gc.max_rel_err = gc.max_rel_err.max(worst);
            }
            None => groups.push(GroupCheck {
                group: name,
                checked: coords.len(),
                max_rel_err: worst,
            }),
        }
    }
    Ok(groups)
}
