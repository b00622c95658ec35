use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minimetric::{Layout, MiniMetricModel, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub dropped: usize,
    /// Original 0-indexed layers kept, in order.
    pub retained_layers: Vec<usize>,
    /// Original pooling-logit index of each kept logit (0 is the embeddings).
    pub pooling_remap: Vec<usize>,
}

/// Layers kept when the `n` layers just below the last one are removed.
///
/// With 1-based layers `1..=L`, layers `L−n ..= L−1` go and layer `L` stays.
pub fn retained_layers(num_layers: usize, n: usize) -> Result<Vec<usize>> {
    if num_layers == 0 || n >= num_layers {
        return Err(Error::config(format!(
            "can drop 0..={} of {num_layers} layers, asked for {n}",
            num_layers.saturating_sub(1)
        )));
    }
    let mut keep: Vec<usize> = (0..num_layers - n - 1).collect();
    keep.push(num_layers - 1);
    Ok(keep)
}

/// Removes `n` tail layers (keeping the last) and their pooling logits.
pub fn drop_layers(model: &MiniMetricModel, n: usize) -> Result<(MiniMetricModel, DropReport)> {
    let cfg = model.config();
    let keep = retained_layers(cfg.num_layers, n)?;
    let new_cfg = ModelConfig {
        num_layers: keep.len(),
        ..cfg.clone()
    };
    let old = model.layout();
    let new = Layout::new(&new_cfg);
    let mut remap: Vec<Option<usize>> = vec![None; new.len()];

    remap[new.tok_emb] = Some(old.tok_emb);
    remap[new.pos_emb] = Some(old.pos_emb);
    for (nl, &ol) in new.layers.iter().zip(&keep) {
        let o = &old.layers[ol];
        let pairs = [
            (nl.ln1_g, o.ln1_g),
            (nl.ln1_b, o.ln1_b),
            (nl.wq, o.wq),
            (nl.bq, o.bq),
            (nl.wk, o.wk),
            (nl.bk, o.bk),
            (nl.wv, o.wv),
            (nl.bv, o.bv),
            (nl.wo, o.wo),
            (nl.bo, o.bo),
            (nl.ln2_g, o.ln2_g),
            (nl.ln2_b, o.ln2_b),
            (nl.w1, o.w1),
            (nl.b1, o.b1),
            (nl.w2, o.w2),
            (nl.b2, o.b2),
        ];
        for (a, b) in pairs {
            remap[a] = Some(b);
        }
    }
    remap[new.pool_g] = Some(old.pool_g);
    remap[new.pool_b] = Some(old.pool_b);
    for (a, b) in new.score.iter().zip(&old.score) {
        remap[a.0] = Some(b.0);
        remap[a.1] = Some(b.1);
    }
    remap[new.tag_w] = Some(old.tag_w);
    remap[new.tag_b] = Some(old.tag_b);

    let pooling_remap: Vec<usize> = std::iter::once(0).chain(keep.iter().map(|l| l + 1)).collect();
    let old_logits = model.params()[old.pool_logits].data();
    let params = remap
        .iter()
        .enumerate()
        .map(|(i, src)| match src {
            Some(s) => Ok(model.params()[*s].clone()),
            None if i == new.pool_logits => crate::Tensor::new(
                vec![pooling_remap.len()],
                pooling_remap.iter().map(|&j| old_logits[j]).collect(),
            ),
            None => Err(Error::config(format!("no source for {}", new.specs[i].name))),
        })
        .collect::<Result<Vec<_>>>()?;
    let pruned = MiniMetricModel::from_params(new_cfg, params)?;
    Ok((
        pruned,
        DropReport {
            dropped: n,
            retained_layers: keep,
            pooling_remap,
        },
    ))
}
