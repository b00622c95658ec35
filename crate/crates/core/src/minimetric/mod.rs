//! The toy learned metric: a pre-LN transformer encoder over a packed
//! `(mt, src, ref)` sequence, layerwise-attention pooling of every layer's
//! hidden states, a sigmoid score head and a 4-class token tag head.

mod engine;
mod pack;
mod tokenizer;

use std::borrow::Cow;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use engine::{
    backward, forward, BatchGrads, ForwardCache, ForwardOptions, LinearInputs, Outputs, Targets,
};
pub use pack::{pack_input, PackedInput};
pub use tokenizer::{fnv1a64, tokenize};

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIAL: usize = 4;
pub const LN_EPS: f32 = 1e-5;

/// Token-level error severity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tag {
    NoError = 0,
    Minor = 1,
    Major = 2,
    Critical = 3,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::NoError, Tag::Minor, Tag::Major, Tag::Critical];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub score_hidden: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::teacher()
    }
}

impl ModelConfig {
    pub fn teacher() -> Self {
        Self {
            vocab_size: 4096,
            max_seq_len: 256,
            num_layers: 4,
            hidden: 128,
            heads: 4,
            ffn: 256,
            score_hidden: vec![96, 32],
            init_seed: 17,
        }
    }

    pub fn student() -> Self {
        Self {
            num_layers: 2,
            hidden: 64,
            ffn: 128,
            ..Self::teacher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::config("num_layers must be at least 1"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size < 8 {
            return Err(Error::config("vocab_size must be at least 8"));
        }
        if self.max_seq_len < 5 || self.ffn == 0 {
            return Err(Error::config("max_seq_len and ffn must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// What a parameter is, for the quantizer, pruner and fine-tuning selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    /// Encoder projection weight, `[out × in]`.
    Linear,
    Bias,
    NormGain,
    NormBias,
    PoolLogits,
    /// Hidden layer of the score head, `[out × in]`.
    HeadLinear,
    /// Output layer of a head, kept in float by the quantizer.
    HeadOutput,
    HeadBias,
}

impl ParamRole {
    pub fn is_head(self) -> bool {
        matches!(self, ParamRole::HeadLinear | ParamRole::HeadOutput | ParamRole::HeadBias)
    }

    /// Biases, LayerNorm affines, pooling logits and both heads.
    pub fn in_bitfit_set(self) -> bool {
        !matches!(self, ParamRole::Embedding | ParamRole::Linear)
    }

    pub fn is_matrix(self) -> bool {
        matches!(
            self,
            ParamRole::Embedding | ParamRole::Linear | ParamRole::HeadLinear | ParamRole::HeadOutput
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Canonical parameter order for a config, with named indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIdx>,
    pub pool_logits: usize,
    pub pool_g: usize,
    pub pool_b: usize,
    /// `(weight, bias)` per score-head layer, last one is the output layer.
    pub score: Vec<(usize, usize)>,
    pub tag_w: usize,
    pub tag_b: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, role| {
            specs.push(ParamSpec { name, shape, role });
            specs.len() - 1
        };
        let d = cfg.hidden;
        let tok_emb = add("tok_emb".into(), vec![cfg.vocab_size, d], ParamRole::Embedding);
        let pos_emb = add("pos_emb".into(), vec![cfg.max_seq_len, d], ParamRole::Embedding);
        let mut layers = Vec::new();
        for l in 0..cfg.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerIdx {
                ln1_g: add(p("ln1.gain"), vec![d], ParamRole::NormGain),
                ln1_b: add(p("ln1.bias"), vec![d], ParamRole::NormBias),
                wq: add(p("attn.q.weight"), vec![d, d], ParamRole::Linear),
                bq: add(p("attn.q.bias"), vec![d], ParamRole::Bias),
                wk: add(p("attn.k.weight"), vec![d, d], ParamRole::Linear),
                bk: add(p("attn.k.bias"), vec![d], ParamRole::Bias),
                wv: add(p("attn.v.weight"), vec![d, d], ParamRole::Linear),
                bv: add(p("attn.v.bias"), vec![d], ParamRole::Bias),
                wo: add(p("attn.o.weight"), vec![d, d], ParamRole::Linear),
                bo: add(p("attn.o.bias"), vec![d], ParamRole::Bias),
                ln2_g: add(p("ln2.gain"), vec![d], ParamRole::NormGain),
                ln2_b: add(p("ln2.bias"), vec![d], ParamRole::NormBias),
                w1: add(p("ffn.in.weight"), vec![cfg.ffn, d], ParamRole::Linear),
                b1: add(p("ffn.in.bias"), vec![cfg.ffn], ParamRole::Bias),
                w2: add(p("ffn.out.weight"), vec![d, cfg.ffn], ParamRole::Linear),
                b2: add(p("ffn.out.bias"), vec![d], ParamRole::Bias),
            });
        }
        let pool_logits = add("pool.logits".into(), vec![cfg.num_layers + 1], ParamRole::PoolLogits);
        let pool_g = add("pool.ln.gain".into(), vec![d], ParamRole::NormGain);
        let pool_b = add("pool.ln.bias".into(), vec![d], ParamRole::NormBias);
        let mut score = Vec::new();
        let mut fan_in = d;
        for (i, &h) in cfg.score_hidden.iter().enumerate() {
            let w = add(format!("score.{i}.weight"), vec![h, fan_in], ParamRole::HeadLinear);
            let b = add(format!("score.{i}.bias"), vec![h], ParamRole::HeadBias);
            score.push((w, b));
            fan_in = h;
        }
        let n = cfg.score_hidden.len();
        let w = add(format!("score.{n}.weight"), vec![1, fan_in], ParamRole::HeadOutput);
        let b = add(format!("score.{n}.bias"), vec![1], ParamRole::HeadBias);
        score.push((w, b));
        let tag_w = add("tag.weight".into(), vec![Tag::ALL.len(), d], ParamRole::HeadOutput);
        let tag_b = add("tag.bias".into(), vec![Tag::ALL.len()], ParamRole::HeadBias);
        Self {
            specs,
            tok_emb,
            pos_emb,
            layers,
            pool_logits,
            pool_g,
            pool_b,
            score,
            tag_w,
            tag_b,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// Read access to a model's parameters in element type `T`.
///
/// Float models hand out borrowed slices; quantized models dequantize on
/// request, one parameter at a time.
pub trait ParamSource<T: Real>: Sync {
    fn config(&self) -> &ModelConfig;
    fn layout(&self) -> &Layout;
    fn param(&self, idx: usize) -> Cow<'_, [T]>;

    /// Selected rows of a 2-D parameter, concatenated.
    fn gather_rows(&self, idx: usize, rows: &[usize]) -> Vec<T> {
        let p = self.param(idx);
        let cols = self.layout().specs[idx].shape[1];
        rows.iter().flat_map(|&r| p[r * cols..(r + 1) * cols].iter().copied()).collect()
    }

    /// Bytes held by the parameters at rest.
    fn resident_bytes(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniMetricModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor>,
}

impl MiniMetricModel {
    /// Fresh model: weights `N(0, 0.02)`, zero biases, unit gains, zero pooling logits.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = Pcg64::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid normal");
        let params = layout
            .specs
            .iter()
            .map(|s| {
                let numel = s.shape.iter().product();
                let data = match s.role {
                    ParamRole::NormGain => vec![1.0; numel],
                    r if r.is_matrix() => (0..numel).map(|_| normal.sample(&mut rng)).collect(),
                    _ => vec![0.0; numel],
                };
                Tensor::new(s.shape.clone(), data).map(|t| t.with_name(s.name.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        let params = params
            .into_iter()
            .zip(&layout.specs)
            .map(|(t, s)| {
                if t.shape() != s.shape.as_slice() {
                    Err(Error::dim(format!(
                        "{}: expected shape {:?}, got {:?}",
                        s.name,
                        s.shape,
                        t.shape()
                    )))
                } else if !t.is_finite() {
                    Err(Error::Input(format!("{}: non-finite values", s.name)))
                } else {
                    Ok(t.with_name(s.name.clone()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn float_bytes(&self) -> usize {
        self.param_count() * 4
    }

    /// Softmax of the pooling logits.
    pub fn pooling_weights(&self) -> Vec<f32> {
        let mut w = self.params[self.layout.pool_logits].data().to_vec();
        crate::tensor::softmax_in_place(&mut w);
        w
    }

    /// Parameters converted to another element type.
    pub fn shadow<T: Real>(&self) -> Shadow<T> {
        Shadow {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|t| t.data().iter().map(|&v| T::c(v as f64)).collect())
                .collect(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(serde_json::to_value(&self.config)?);
        for (t, s) in self.params.iter().zip(&self.layout.specs) {
            c.push_f32(&s.name, t);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(c.header.model_config.clone())
            .map_err(|e| Error::format(8, format!("bad model config: {e}")))?;
        config.validate()?;
        let layout = Layout::new(&config);
        let params = layout
            .specs
            .iter()
            .map(|s| {
                let e = c
                    .entry(&s.name)
                    .ok_or_else(|| Error::format(8, format!("missing tensor {}", s.name)))?;
                c.read_f32(e)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(config, params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }
}

impl ParamSource<f32> for MiniMetricModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn param(&self, idx: usize) -> Cow<'_, [f32]> {
        Cow::Borrowed(self.params[idx].data())
    }

    fn resident_bytes(&self) -> usize {
        self.float_bytes()
    }
}

/// Model parameters held in an arbitrary element type (e.g. a 64-bit copy
/// for gradient checking).
#[derive(Clone, Debug)]
pub struct Shadow<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<Vec<T>>,
}

impl<T: Real> ParamSource<T> for Shadow<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn param(&self, idx: usize) -> Cow<'_, [T]> {
        Cow::Borrowed(&self.params[idx])
    }

    fn resident_bytes(&self) -> usize {
        self.params.iter().map(Vec::len).sum::<usize>() * std::mem::size_of::<T>()
    }
}

/// Sentence score and per-translation-token tag distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub score: f32,
    pub tags: Vec<[f32; 4]>,
}

/// Scores one example; `reference = None` selects reference-free mode.
pub fn predict<M: ParamSource<f32> + ?Sized>(
    model: &M,
    src: &[u32],
    mt: &[u32],
    reference: Option<&[u32]>,
) -> Result<Prediction> {
    let packed = pack_input(src, mt, reference, model.config())?;
    let mut out = predict_packed(model, std::slice::from_ref(&packed), None)?;
    Ok(out.pop().expect("one prediction"))
}

/// Scores a batch of packed inputs in one encoder pass.
pub fn predict_packed<M: ParamSource<f32> + ?Sized>(
    model: &M,
    batch: &[PackedInput],
    tracker: Option<&crate::bench::MemTracker>,
) -> Result<Vec<Prediction>> {
    let out = forward(
        model,
        batch,
        &ForwardOptions {
            keep_cache: false,
            tracker,
        },
    )?;
    Ok(out
        .outputs
        .scores
        .into_iter()
        .zip(out.outputs.tag_probs)
        .map(|(score, tags)| Prediction { score, tags })
        .collect())
}

/// Hidden states of every layer (`L + 1` tensors of `[seq × d]`).
pub fn encode<M: ParamSource<f32> + ?Sized>(model: &M, ids: &[u32]) -> Result<Vec<Tensor>> {
    let packed = PackedInput {
        ids: ids.to_vec(),
        mt_span: 0..0,
    };
    let out = forward(
        model,
        std::slice::from_ref(&packed),
        &ForwardOptions {
            keep_cache: true,
            tracker: None,
        },
    )?;
    let cache = out.cache.expect("cache kept");
    let d = model.config().hidden;
    cache
        .states
        .into_iter()
        .map(|s| Tensor::new(vec![ids.len(), d], s))
        .collect()
}

/// `Σ_ℓ softmax(logits)[ℓ] · states[ℓ]`.
pub fn layerwise_pool(states: &[Tensor], logits: &[f32]) -> Result<Tensor> {
    if states.len() != logits.len() || states.is_empty() {
        return Err(Error::dim(format!(
            "{} pooling logits for {} states",
            logits.len(),
            states.len()
        )));
    }
    let shape = states[0].shape().to_vec();
    if states.iter().any(|s| s.shape() != shape.as_slice()) {
        return Err(Error::dim("states disagree in shape"));
    }
    let mut w = logits.to_vec();
    crate::tensor::softmax_in_place(&mut w);
    let mut out = vec![0.0f32; states[0].numel()];
    for (s, wl) in states.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(s.data()) {
            *o += wl * v;
        }
    }
    Tensor::new(shape, out)
}
