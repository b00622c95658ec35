//! Batched forward pass and exact reverse-mode gradients.
//!
//! A batch is processed as one `[N × d]` activation matrix holding every
//! sequence back to back (no padding between sequences); only attention looks
//! at sequence boundaries. PAD tokens inside a sequence are masked as keys.

use std::borrow::Cow;
use std::ops::Range;

use super::{Layout, LayerIdx, PackedInput, ParamSource, Tag, LN_EPS, PAD};
use crate::bench::MemTracker;
use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, sigmoid, softmax_in_place, Real};

#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Keep every intermediate for [`backward`] and calibration.
    pub keep_cache: bool,
    /// Allocation accounting; only honoured when `keep_cache` is false.
    pub tracker: Option<&'a MemTracker>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outputs<T> {
    pub scores: Vec<T>,
    pub tag_probs: Vec<Vec<[T; 4]>>,
}

pub struct ForwardResult<T> {
    pub outputs: Outputs<T>,
    pub cache: Option<ForwardCache<T>>,
}

struct LayerCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    b: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

/// Everything the backward pass and calibration collectors need.
pub struct ForwardCache<T> {
    spans: Vec<Range<usize>>,
    mt_rows: Vec<Range<usize>>,
    ids: Vec<u32>,
    positions: Vec<usize>,
    /// `L + 1` hidden-state matrices `[N × d]`.
    pub states: Vec<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    pool_w: Vec<T>,
    pool_xhat: Vec<T>,
    pool_rstd: Vec<T>,
    /// Inputs of each score-head layer, `[B × fan_in]`.
    head_in: Vec<Vec<T>>,
    /// Pre-activations of each score-head layer.
    head_z: Vec<Vec<T>>,
    tag_in: Vec<T>,
}

/// Input activations of one weight matrix, `rows × cols` with `cols` equal to
/// the matrix's input dimension.
pub struct LinearInputs<'a, T> {
    pub param: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [T],
}

impl<T: Real> ForwardCache<T> {
    pub fn num_rows(&self) -> usize {
        self.ids.len()
    }

    /// Input activations feeding every encoder projection and hidden score-head
    /// layer, in parameter order.
    pub fn linear_inputs(&self, layout: &Layout) -> Vec<LinearInputs<'_, T>> {
        let n = self.ids.len();
        let b = self.spans.len();
        let mut out = Vec::new();
        for (li, lc) in layout.layers.iter().zip(&self.layers) {
            let d = lc.a.len() / n.max(1);
            let ffn = lc.g.len() / n.max(1);
            for p in [li.wq, li.wk, li.wv] {
                out.push(LinearInputs { param: p, rows: n, cols: d, data: &lc.a });
            }
            out.push(LinearInputs { param: li.wo, rows: n, cols: d, data: &lc.ctx });
            out.push(LinearInputs { param: li.w1, rows: n, cols: d, data: &lc.b });
            out.push(LinearInputs { param: li.w2, rows: n, cols: ffn, data: &lc.g });
        }
        for (i, (w, _)) in layout.score.iter().enumerate() {
            let cols = self.head_in[i].len() / b.max(1);
            out.push(LinearInputs { param: *w, rows: b, cols, data: &self.head_in[i] });
        }
        out
    }
}

/// Buffer that reports its size to a tracker while alive.
struct Buf<'t, T> {
    v: Vec<T>,
    tracker: Option<&'t MemTracker>,
}

impl<'t, T: Real> Buf<'t, T> {
    fn zeros(n: usize, tracker: Option<&'t MemTracker>) -> Self {
        Self::from_vec(vec![T::zero(); n], tracker)
    }

    fn from_vec(v: Vec<T>, tracker: Option<&'t MemTracker>) -> Self {
        if let Some(t) = tracker {
            t.alloc(v.len() * std::mem::size_of::<T>());
        }
        Self { v, tracker }
    }

    fn into_vec(mut self) -> Vec<T> {
        std::mem::take(&mut self.v)
    }
}

impl<T> Drop for Buf<'_, T> {
    fn drop(&mut self) {
        if let Some(t) = self.tracker {
            t.free(self.v.len() * std::mem::size_of::<T>());
        }
    }
}

impl<T> std::ops::Deref for Buf<'_, T> {
    type Target = Vec<T>;
    fn deref(&self) -> &Vec<T> {
        &self.v
    }
}

impl<T> std::ops::DerefMut for Buf<'_, T> {
    fn deref_mut(&mut self) -> &mut Vec<T> {
        &mut self.v
    }
}

/// A parameter fetched from the source; dequantized copies are tracked.
struct Held<'m, 't, T: Clone> {
    data: Cow<'m, [T]>,
    tracker: Option<&'t MemTracker>,
}

impl<T: Clone> Drop for Held<'_, '_, T> {
    fn drop(&mut self) {
        if let (Some(t), Cow::Owned(v)) = (self.tracker, &self.data) {
            t.free(v.len() * std::mem::size_of::<T>());
        }
    }
}

impl<T: Clone> std::ops::Deref for Held<'_, '_, T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

fn hold<'m, 't, T: Real, M: ParamSource<T> + ?Sized>(
    model: &'m M,
    idx: usize,
    tracker: Option<&'t MemTracker>,
) -> Held<'m, 't, T> {
    let data = model.param(idx);
    if let (Some(t), Cow::Owned(v)) = (tracker, &data) {
        t.alloc(v.len() * std::mem::size_of::<T>());
    }
    Held { data, tracker }
}

/// `y[n × out] = x[n × in] · Wᵀ + b` with `W` stored `[out × in]`.
fn linear<T: Real>(x: &[T], n: usize, fan_in: usize, w: &[T], bias: &[T], out: &mut [T]) {
    let fan_out = bias.len();
    T::gemm(n, fan_in, fan_out, x, false, w, true, out, false);
    for row in out.chunks_exact_mut(fan_out) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o = *o + *b;
        }
    }
}

/// Row-wise LayerNorm; optionally records normalized rows and reciprocal stds.
fn norm_rows<T: Real>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    mut xhat: Option<&mut [T]>,
    mut rstd: Option<&mut [T]>,
) {
    let inv_d = T::c(1.0 / d as f64);
    let eps = T::c(LN_EPS as f64);
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            or[i] = gain[i] * h + bias[i];
            if let Some(xh) = xhat.as_deref_mut() {
                xh[r * d + i] = h;
            }
        }
        if let Some(s) = rstd.as_deref_mut() {
            s[r] = rs;
        }
    }
}

fn validate_batch(batch: &[PackedInput], vocab: usize, max_len: usize) -> Result<()> {
    for (i, p) in batch.iter().enumerate() {
        if p.ids.is_empty() {
            return Err(Error::Input(format!("sequence {i} is empty")));
        }
        if p.ids.len() > max_len {
            return Err(Error::Input(format!(
                "sequence {i} has {} tokens, limit {max_len}",
                p.ids.len()
            )));
        }
        if let Some(bad) = p.ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        if p.mt_span.end > p.ids.len() || p.mt_span.start > p.mt_span.end {
            return Err(Error::Input(format!("sequence {i} has an invalid mt span")));
        }
    }
    Ok(())
}

pub fn forward<T: Real, M: ParamSource<T> + ?Sized>(
    model: &M,
    batch: &[PackedInput],
    opts: &ForwardOptions<'_>,
) -> Result<ForwardResult<T>> {
    let cfg = model.config();
    let lay = model.layout();
    validate_batch(batch, cfg.vocab_size, cfg.max_seq_len)?;
    let keep = opts.keep_cache;
    let tr = if keep { None } else { opts.tracker };
    let d = cfg.hidden;

    let mut spans = Vec::with_capacity(batch.len());
    let mut mt_rows = Vec::with_capacity(batch.len());
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for p in batch {
        let off = ids.len();
        spans.push(off..off + p.len());
        mt_rows.push(off + p.mt_span.start..off + p.mt_span.end);
        ids.extend_from_slice(&p.ids);
        positions.extend(0..p.len());
    }
    let n = ids.len();
    let key_pad: Vec<bool> = ids.iter().map(|&t| t == PAD).collect();

    // embeddings
    let tok_idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let mut x = Buf::from_vec(model.gather_rows(lay.tok_emb, &tok_idx), tr);
    {
        let pos = Buf::from_vec(model.gather_rows(lay.pos_emb, &positions), tr);
        for (a, b) in x.iter_mut().zip(pos.iter()) {
            *a = *a + *b;
        }
    }

    let mut pool_w: Vec<T> = model.param(lay.pool_logits).into_owned();
    softmax_in_place(&mut pool_w);

    let mut states: Vec<Vec<T>> = Vec::new();
    let mut pooled = Buf::zeros(n * d, tr);
    let mut layer_caches = Vec::new();
    let accumulate = |pooled: &mut [T], x: &[T], w: T| {
        for (p, v) in pooled.iter_mut().zip(x) {
            *p = *p + w * *v;
        }
    };
    accumulate(&mut pooled, &x, pool_w[0]);
    if keep {
        states.push(x.to_vec());
    }
    for (l, li) in lay.layers.iter().enumerate() {
        let cache = layer_forward(model, li, &mut x, &spans, &key_pad, tr, keep);
        accumulate(&mut pooled, &x, pool_w[l + 1]);
        if keep {
            states.push(x.to_vec());
            layer_caches.extend(cache);
        }
    }
    drop(x);

    // pooled LayerNorm
    let mut hp = Buf::zeros(n * d, tr);
    let mut pool_xhat = if keep { vec![T::zero(); n * d] } else { Vec::new() };
    let mut pool_rstd = if keep { vec![T::zero(); n] } else { Vec::new() };
    {
        let g = hold(model, lay.pool_g, tr);
        let b = hold(model, lay.pool_b, tr);
        norm_rows(
            &pooled,
            d,
            &g,
            &b,
            &mut hp,
            keep.then_some(&mut pool_xhat[..]),
            keep.then_some(&mut pool_rstd[..]),
        );
    }
    drop(pooled);

    // score head over CLS rows
    let bsz = batch.len();
    let mut act = Vec::with_capacity(bsz * d);
    for s in &spans {
        act.extend_from_slice(&hp[s.start * d..(s.start + 1) * d]);
    }
    let mut head_in = Vec::new();
    let mut head_z = Vec::new();
    let last = lay.score.len() - 1;
    let mut fan_in = d;
    let mut scores = Vec::new();
    for (i, &(wi, bi)) in lay.score.iter().enumerate() {
        let w = hold(model, wi, tr);
        let b = hold(model, bi, tr);
        let fan_out = b.len();
        let mut z = vec![T::zero(); bsz * fan_out];
        linear(&act, bsz, fan_in, &w, &b, &mut z);
        if i == last {
            scores = z.iter().map(|&v| sigmoid(v)).collect();
        } else {
            let next = z.iter().map(|&v| gelu(v)).collect();
            let input = std::mem::replace(&mut act, next);
            if keep {
                head_in.push(input);
            }
        }
        if keep {
            if i == last {
                head_in.push(std::mem::take(&mut act));
            }
            head_z.push(z);
        }
        fan_in = fan_out;
    }

    // tag head over translation rows
    let rows: Vec<usize> = mt_rows.iter().flat_map(|r| r.clone()).collect();
    let mut tag_in = Vec::with_capacity(rows.len() * d);
    for &r in &rows {
        tag_in.extend_from_slice(&hp[r * d..(r + 1) * d]);
    }
    let mut logits = vec![T::zero(); rows.len() * 4];
    {
        let w = hold(model, lay.tag_w, tr);
        let b = hold(model, lay.tag_b, tr);
        linear(&tag_in, rows.len(), d, &w, &b, &mut logits);
    }
    let mut tag_probs = Vec::with_capacity(bsz);
    let mut cursor = 0;
    for r in &mt_rows {
        let mut per = Vec::with_capacity(r.len());
        for _ in r.clone() {
            let row = &mut logits[cursor * 4..cursor * 4 + 4];
            softmax_in_place(row);
            per.push([row[0], row[1], row[2], row[3]]);
            cursor += 1;
        }
        tag_probs.push(per);
    }

    let cache = keep.then_some(ForwardCache {
        spans,
        mt_rows,
        ids,
        positions,
        states,
        layers: layer_caches,
        pool_w,
        pool_xhat,
        pool_rstd,
        head_in,
        head_z,
        tag_in,
    });
    Ok(ForwardResult {
        outputs: Outputs { scores, tag_probs },
        cache,
    })
}

fn layer_forward<'t, T: Real, M: ParamSource<T> + ?Sized>(
    model: &M,
    li: &LayerIdx,
    x: &mut Buf<'t, T>,
    spans: &[Range<usize>],
    key_pad: &[bool],
    tr: Option<&'t MemTracker>,
    keep: bool,
) -> Option<LayerCache<T>> {
    let cfg = model.config();
    let (d, h, ffn) = (cfg.hidden, cfg.heads, cfg.ffn);
    let dh = d / h;
    let n = key_pad.len();
    let scale = T::c(1.0 / (dh as f64).sqrt());

    let mut a = Buf::zeros(n * d, tr);
    let mut xhat1 = if keep { vec![T::zero(); n * d] } else { Vec::new() };
    let mut rstd1 = if keep { vec![T::zero(); n] } else { Vec::new() };
    {
        let g = hold(model, li.ln1_g, tr);
        let b = hold(model, li.ln1_b, tr);
        norm_rows(x, d, &g, &b, &mut a, keep.then_some(&mut xhat1[..]), keep.then_some(&mut rstd1[..]));
    }
    let project = |wi: usize, bi: usize| {
        let w = hold(model, wi, tr);
        let b = hold(model, bi, tr);
        let mut out = Buf::zeros(n * d, tr);
        linear(&a, n, d, &w, &b, &mut out);
        out
    };
    let q = project(li.wq, li.bq);
    let k = project(li.wk, li.bk);
    let v = project(li.wv, li.bv);

    let mut ctx = Buf::zeros(n * d, tr);
    let prob_len: usize = if keep { spans.iter().map(|s| s.len() * s.len() * h).sum() } else { 0 };
    let mut probs = Vec::with_capacity(prob_len);
    for s in spans {
        let len = s.len();
        let mut p = Buf::zeros(len * len, tr);
        for hh in 0..h {
            let base = s.start * d + hh * dh;
            T::gemm_strided(
                len,
                dh,
                len,
                (&q[base..], d, 1),
                (&k[base..], 1, d),
                (&mut p, len, 1),
                false,
            );
            for row in p.chunks_exact_mut(len) {
                for (j, val) in row.iter_mut().enumerate() {
                    *val = if key_pad[s.start + j] {
                        T::neg_infinity()
                    } else {
                        *val * scale
                    };
                }
                softmax_in_place(row);
            }
            T::gemm_strided(
                len,
                len,
                dh,
                (&p, len, 1),
                (&v[base..], d, 1),
                (&mut ctx[base..], d, 1),
                false,
            );
            if keep {
                probs.extend_from_slice(&p);
            }
        }
    }
    {
        let w = hold(model, li.wo, tr);
        let b = hold(model, li.bo, tr);
        let mut o = Buf::zeros(n * d, tr);
        linear(&ctx, n, d, &w, &b, &mut o);
        for (xv, ov) in x.iter_mut().zip(o.iter()) {
            *xv = *xv + *ov;
        }
    }

    let mut bnorm = Buf::zeros(n * d, tr);
    let mut xhat2 = if keep { vec![T::zero(); n * d] } else { Vec::new() };
    let mut rstd2 = if keep { vec![T::zero(); n] } else { Vec::new() };
    {
        let g = hold(model, li.ln2_g, tr);
        let b = hold(model, li.ln2_b, tr);
        norm_rows(x, d, &g, &b, &mut bnorm, keep.then_some(&mut xhat2[..]), keep.then_some(&mut rstd2[..]));
    }
    let mut u = Buf::zeros(n * ffn, tr);
    {
        let w = hold(model, li.w1, tr);
        let b = hold(model, li.b1, tr);
        linear(&bnorm, n, d, &w, &b, &mut u);
    }
    let mut g = Buf::zeros(n * ffn, tr);
    for (gv, uv) in g.iter_mut().zip(u.iter()) {
        *gv = gelu(*uv);
    }
    {
        let w = hold(model, li.w2, tr);
        let b = hold(model, li.b2, tr);
        let mut f = Buf::zeros(n * d, tr);
        linear(&g, n, ffn, &w, &b, &mut f);
        for (xv, fv) in x.iter_mut().zip(f.iter()) {
            *xv = *xv + *fv;
        }
    }

    keep.then(|| LayerCache {
        xhat1,
        rstd1,
        a: a.into_vec(),
        q: q.into_vec(),
        k: k.into_vec(),
        v: v.into_vec(),
        probs,
        ctx: ctx.into_vec(),
        xhat2,
        rstd2,
        b: bnorm.into_vec(),
        u: u.into_vec(),
        g: g.into_vec(),
    })
}

/// Supervision for one batch.
#[derive(Clone, Debug)]
pub struct Targets<'a, T> {
    pub scores: &'a [T],
    /// Per-example tags aligned with the packed translation span.
    pub tags: &'a [&'a [Tag]],
    pub lambda: T,
    /// Multiplier applied to every example's loss (`1 / batch size` for a mean).
    pub weight: T,
}

/// Weighted loss sums and gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGrads<T> {
    pub loss: T,
    pub score_loss: T,
    pub tag_loss: T,
    /// One buffer per parameter; empty for parameters not selected.
    pub grads: Vec<Vec<T>>,
}

impl<T: Real> BatchGrads<T> {
    pub fn zeros(layout: &Layout, selected: &[bool]) -> Self {
        Self {
            loss: T::zero(),
            score_loss: T::zero(),
            tag_loss: T::zero(),
            grads: layout
                .specs
                .iter()
                .zip(selected)
                .map(|(s, &on)| {
                    if on {
                        vec![T::zero(); s.shape.iter().product()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &BatchGrads<T>) {
        self.loss = self.loss + other.loss;
        self.score_loss = self.score_loss + other.score_loss;
        self.tag_loss = self.tag_loss + other.tag_loss;
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a = *a + *b;
    }
}

/// Bias gradient: column sums of `dy[n × out]`.
fn bias_grad<T: Real>(dy: &[T], out: usize, grad: &mut [T]) {
    for row in dy.chunks_exact(out) {
        add_into(grad, row);
    }
}

/// Gradients of `y = x Wᵀ + b`: accumulates `dW`, `db` when selected and
/// writes (or adds, when `accumulate`) `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    n: usize,
    fan_in: usize,
    fan_out: usize,
    w: &[T],
    grads: &mut [Vec<T>],
    (wi, bi): (usize, usize),
    dx: Option<(&mut [T], bool)>,
) {
    if !grads[wi].is_empty() {
        T::gemm(fan_out, n, fan_in, dy, true, x, false, &mut grads[wi], true);
    }
    if !grads[bi].is_empty() {
        bias_grad(dy, fan_out, &mut grads[bi]);
    }
    if let Some((dx, acc)) = dx {
        T::gemm(n, fan_out, fan_in, dy, false, w, false, dx, acc);
    }
}

/// LayerNorm backward; accumulates gain/bias gradients and adds into `dx`.
#[allow(clippy::too_many_arguments)]
fn norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    grads: &mut [Vec<T>],
    (gi, bi): (usize, usize),
    dx: &mut [T],
) {
    let inv_d = T::c(1.0 / d as f64);
    let mut dxh = vec![T::zero(); d];
    for (r, (dyr, xr)) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
        if !grads[gi].is_empty() {
            for i in 0..d {
                grads[gi][i] = grads[gi][i] + dyr[i] * xr[i];
            }
        }
        if !grads[bi].is_empty() {
            add_into(&mut grads[bi], dyr);
        }
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..d {
            dxh[i] = dyr[i] * gain[i];
            m1 = m1 + dxh[i];
            m2 = m2 + dxh[i] * xr[i];
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        let out = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            out[i] = out[i] + rstd[r] * (dxh[i] - m1 - xr[i] * m2);
        }
    }
}

/// Computes the weighted loss and the gradients of every selected parameter.
///
/// Per example the loss is `(q − q*)² + λ · mean_t CE(tags_t, tag*_t)`; the tag
/// term is zero for an empty translation span.
pub fn backward<T: Real, M: ParamSource<T> + ?Sized>(
    model: &M,
    batch: &[PackedInput],
    targets: &Targets<'_, T>,
    selected: &[bool],
) -> Result<BatchGrads<T>> {
    let cfg = model.config();
    let lay = model.layout();
    if targets.scores.len() != batch.len() || targets.tags.len() != batch.len() {
        return Err(Error::dim("targets do not match batch size"));
    }
    for (p, t) in batch.iter().zip(targets.tags) {
        if p.mt_span.len() != t.len() {
            return Err(Error::dim(format!(
                "{} tags for a translation span of {}",
                t.len(),
                p.mt_span.len()
            )));
        }
    }
    if selected.len() != lay.len() {
        return Err(Error::dim("selector length disagrees with parameter count"));
    }
    let fw = forward(
        model,
        batch,
        &ForwardOptions {
            keep_cache: true,
            tracker: None,
        },
    )?;
    let cache = fw.cache.expect("cache kept");
    let out = fw.outputs;
    let mut res = BatchGrads::zeros(lay, selected);
    let grads = &mut res.grads;
    let (d, h, ffn) = (cfg.hidden, cfg.heads, cfg.ffn);
    let dh = d / h;
    let n = cache.ids.len();
    let bsz = batch.len();
    let wgt = targets.weight;
    let two = T::c(2.0);

    // losses and output gradients
    let mut dscore = vec![T::zero(); bsz];
    for (i, ds) in dscore.iter_mut().enumerate() {
        let q = out.scores[i];
        let diff = q - targets.scores[i];
        res.score_loss = res.score_loss + wgt * diff * diff;
        // through the sigmoid: dq/dz = q(1 − q)
        *ds = wgt * two * diff * q * (T::one() - q);
    }
    let mt_total: usize = cache.mt_rows.iter().map(|r| r.len()).sum();
    let mut dlogits = vec![T::zero(); mt_total * 4];
    let mut cursor = 0;
    for (i, probs) in out.tag_probs.iter().enumerate() {
        if probs.is_empty() {
            continue;
        }
        let per = wgt * targets.lambda / T::c(probs.len() as f64);
        for (p, tag) in probs.iter().zip(targets.tags[i]) {
            let t = tag.index();
            res.tag_loss = res.tag_loss - per * p[t].max(T::c(1e-30)).ln();
            for c in 0..4 {
                let onehot = if c == t { T::one() } else { T::zero() };
                dlogits[cursor * 4 + c] = per * (p[c] - onehot);
            }
            cursor += 1;
        }
    }
    res.loss = res.score_loss + res.tag_loss;

    let mut dhp = vec![T::zero(); n * d];

    // tag head
    {
        let w = model.param(lay.tag_w);
        let mut dtag_in = vec![T::zero(); mt_total * d];
        linear_backward(
            &dlogits,
            &cache.tag_in,
            mt_total,
            d,
            4,
            &w,
            grads,
            (lay.tag_w, lay.tag_b),
            Some((&mut dtag_in, false)),
        );
        let mut c = 0;
        for r in &cache.mt_rows {
            for row in r.clone() {
                add_into(&mut dhp[row * d..(row + 1) * d], &dtag_in[c * d..(c + 1) * d]);
                c += 1;
            }
        }
    }

    // score head, output layer first
    {
        let mut dz = dscore;
        for i in (0..lay.score.len()).rev() {
            let (wi, bi) = lay.score[i];
            let w = model.param(wi);
            let fan_out = lay.specs[bi].shape[0];
            let fan_in = lay.specs[wi].shape[1];
            let mut dx = vec![T::zero(); bsz * fan_in];
            linear_backward(
                &dz,
                &cache.head_in[i],
                bsz,
                fan_in,
                fan_out,
                &w,
                grads,
                (wi, bi),
                Some((&mut dx, false)),
            );
            if i > 0 {
                let zprev = &cache.head_z[i - 1];
                for (g, z) in dx.iter_mut().zip(zprev) {
                    *g = *g * gelu_grad(*z);
                }
            } else {
                for (b, s) in cache.spans.iter().enumerate() {
                    add_into(&mut dhp[s.start * d..(s.start + 1) * d], &dx[b * d..(b + 1) * d]);
                }
            }
            dz = dx;
        }
    }

    // pooled LayerNorm
    let mut dpool = vec![T::zero(); n * d];
    {
        let g = model.param(lay.pool_g);
        norm_backward(
            &dhp,
            &cache.pool_xhat,
            &cache.pool_rstd,
            &g,
            d,
            grads,
            (lay.pool_g, lay.pool_b),
            &mut dpool,
        );
    }
    drop(dhp);

    // pooling weights
    {
        let dw: Vec<T> = cache
            .states
            .iter()
            .map(|s| s.iter().zip(&dpool).map(|(a, b)| *a * *b).sum())
            .collect();
        let mix: T = dw.iter().zip(&cache.pool_w).map(|(g, w)| *g * *w).sum();
        if !grads[lay.pool_logits].is_empty() {
            for l in 0..dw.len() {
                let gl = cache.pool_w[l] * (dw[l] - mix);
                grads[lay.pool_logits][l] = grads[lay.pool_logits][l] + gl;
            }
        }
    }

    // encoder layers, last first; `dx` carries d(loss)/d(states[l])
    let scaled = |w: T| dpool.iter().map(|&g| g * w).collect::<Vec<T>>();
    let num_layers = lay.layers.len();
    let mut dx = scaled(cache.pool_w[num_layers]);
    for l in (0..num_layers).rev() {
        let li = &lay.layers[l];
        let lc = &cache.layers[l];

        // FFN branch: states[l+1] = x1 + (gelu(b W1ᵀ + b1) W2ᵀ + b2)
        let mut dg = vec![T::zero(); n * ffn];
        {
            let w2 = model.param(li.w2);
            linear_backward(&dx, &lc.g, n, ffn, d, &w2, grads, (li.w2, li.b2), Some((&mut dg, false)));
        }
        for (g, u) in dg.iter_mut().zip(&lc.u) {
            *g = *g * gelu_grad(*u);
        }
        let mut db = vec![T::zero(); n * d];
        {
            let w1 = model.param(li.w1);
            linear_backward(&dg, &lc.b, n, d, ffn, &w1, grads, (li.w1, li.b1), Some((&mut db, false)));
        }
        drop(dg);
        // dx1 = dx + LN2'(db)
        let mut dx1 = dx;
        {
            let g = model.param(li.ln2_g);
            norm_backward(&db, &lc.xhat2, &lc.rstd2, &g, d, grads, (li.ln2_g, li.ln2_b), &mut dx1);
        }
        drop(db);

        // attention branch: x1 = x + (ctx Woᵀ + bo)
        let mut dctx = vec![T::zero(); n * d];
        {
            let wo = model.param(li.wo);
            linear_backward(&dx1, &lc.ctx, n, d, d, &wo, grads, (li.wo, li.bo), Some((&mut dctx, false)));
        }
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut poff = 0;
        for s in &cache.spans {
            let len = s.len();
            let mut dp = vec![T::zero(); len * len];
            for hh in 0..h {
                let p = &lc.probs[poff..poff + len * len];
                poff += len * len;
                let base = s.start * d + hh * dh;
                // dP = dctx_h · V_hᵀ
                T::gemm_strided(len, dh, len, (&dctx[base..], d, 1), (&lc.v[base..], 1, d), (&mut dp, len, 1), false);
                // dV_h = Pᵀ · dctx_h
                T::gemm_strided(len, len, dh, (p, 1, len), (&dctx[base..], d, 1), (&mut dv[base..], d, 1), false);
                // softmax backward, then the 1/sqrt(dh) scale
                for (prow, drow) in p.chunks_exact(len).zip(dp.chunks_exact_mut(len)) {
                    let dot: T = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum();
                    for (dv_, pv) in drow.iter_mut().zip(prow) {
                        *dv_ = *pv * (*dv_ - dot) * scale;
                    }
                }
                // dQ_h = dS · K_h, dK_h = dSᵀ · Q_h
                T::gemm_strided(len, len, dh, (&dp, len, 1), (&lc.k[base..], d, 1), (&mut dq[base..], d, 1), false);
                T::gemm_strided(len, len, dh, (&dp, 1, len), (&lc.q[base..], d, 1), (&mut dk[base..], d, 1), false);
            }
        }
        drop(dctx);
        let mut da = vec![T::zero(); n * d];
        {
            let wq = model.param(li.wq);
            let wk = model.param(li.wk);
            let wv = model.param(li.wv);
            linear_backward(&dq, &lc.a, n, d, d, &wq, grads, (li.wq, li.bq), Some((&mut da, false)));
            linear_backward(&dk, &lc.a, n, d, d, &wk, grads, (li.wk, li.bk), Some((&mut da, true)));
            linear_backward(&dv, &lc.a, n, d, d, &wv, grads, (li.wv, li.bv), Some((&mut da, true)));
        }
        // dx_in = dx1 + LN1'(da) + pooling contribution
        let mut dprev = dx1;
        {
            let g = model.param(li.ln1_g);
            norm_backward(&da, &lc.xhat1, &lc.rstd1, &g, d, grads, (li.ln1_g, li.ln1_b), &mut dprev);
        }
        let wl = cache.pool_w[l];
        for (a, b) in dprev.iter_mut().zip(&dpool) {
            *a = *a + wl * *b;
        }
        dx = dprev;
    }

    // embeddings
    if !grads[lay.tok_emb].is_empty() {
        for (r, &t) in cache.ids.iter().enumerate() {
            let t = t as usize;
            add_into(&mut grads[lay.tok_emb][t * d..(t + 1) * d], &dx[r * d..(r + 1) * d]);
        }
    }
    if !grads[lay.pos_emb].is_empty() {
        for (r, &p) in cache.positions.iter().enumerate() {
            add_into(&mut grads[lay.pos_emb][p * d..(p + 1) * d], &dx[r * d..(r + 1) * d]);
        }
    }
    Ok(res)
}
