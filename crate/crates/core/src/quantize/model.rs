use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::absmax::{absmax_int8, OUTLIER_THRESHOLD};
use super::gptq::{gptq_layer, rtn_layer, DEFAULT_DAMPING, DEFAULT_GROUP};
use super::nf4::{nf4_quantize, NF4_BLOCK, NF4_SCALE_BLOCK};
use super::tensor::{QuantData, QuantizedTensor, Scheme};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::minimetric::{
    forward, ForwardOptions, Layout, MiniMetricModel, ModelConfig, PackedInput, ParamRole, ParamSource,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub scheme: Scheme,
    /// Grid width for `affine` and `gptq`; fixed at 8 for `absmax8` and 4 for `nf4`.
    pub bits: u8,
    pub group_size: usize,
    pub damping: f64,
    pub outlier_threshold: f32,
    pub nf4_block: usize,
    pub nf4_scale_block: usize,
}

impl QuantSpec {
    pub fn new(scheme: Scheme, bits: u8) -> Self {
        let bits = match scheme {
            Scheme::Absmax8 => 8,
            Scheme::Nf4 => 4,
            _ => bits,
        };
        Self {
            scheme,
            bits,
            group_size: DEFAULT_GROUP,
            damping: DEFAULT_DAMPING,
            outlier_threshold: OUTLIER_THRESHOLD,
            nf4_block: NF4_BLOCK,
            nf4_scale_block: NF4_SCALE_BLOCK,
        }
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(self.scheme, Scheme::Gptq | Scheme::Absmax8)
    }
}

/// Parameters that get quantized: embeddings and every weight matrix except
/// the heads' output layers.
pub fn is_quantized_role(role: ParamRole) -> bool {
    matches!(role, ParamRole::Embedding | ParamRole::Linear | ParamRole::HeadLinear)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stored {
    Float(Tensor),
    Quant(QuantizedTensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Stored>,
}

fn calibration_inputs(
    work: &MiniMetricModel,
    calib: &[PackedInput],
    param: usize,
) -> Result<(Vec<f32>, usize)> {
    let fw = forward(
        work,
        calib,
        &ForwardOptions {
            keep_cache: true,
            tracker: None,
        },
    )?;
    let cache = fw.cache.expect("cache kept");
    let li = cache
        .linear_inputs(work.layout())
        .into_iter()
        .find(|l| l.param == param)
        .ok_or_else(|| Error::config(format!("no calibration input for {}", work.layout().specs[param].name)))?;
    Ok((li.data.to_vec(), li.rows))
}

/// Quantizes every embedding and hidden weight matrix.
///
/// `gptq` runs block by block: each group of weights sharing an input is
/// calibrated on activations produced by the already quantized earlier
/// layers. Embeddings have no input activations and use the uncalibrated
/// grid of the same width.
pub fn quantize_model(
    model: &MiniMetricModel,
    spec: &QuantSpec,
    calib: Option<&[PackedInput]>,
) -> Result<QuantizedModel> {
    let calib = match (spec.needs_calibration(), calib) {
        (true, None) => return Err(Error::config(format!("{} needs a calibration batch", spec.scheme.label()))),
        (true, Some([])) => return Err(Error::config("calibration batch is empty")),
        (_, c) => c.unwrap_or(&[]),
    };
    let layout = model.layout().clone();
    let mut work = model.clone();
    let mut stored: Vec<Option<QuantizedTensor>> = vec![None; layout.len()];

    // Calibrated order: weights sharing an input are quantized together.
    let mut order: Vec<Vec<usize>> = Vec::new();
    for l in &layout.layers {
        order.push(vec![l.wq, l.wk, l.wv]);
        order.push(vec![l.wo]);
        order.push(vec![l.w1]);
        order.push(vec![l.w2]);
    }
    for (i, s) in layout.specs.iter().enumerate() {
        if s.role == ParamRole::HeadLinear {
            order.push(vec![i]);
        }
    }

    let feature_max = if spec.scheme == Scheme::Absmax8 {
        let fw = forward(
            model,
            calib,
            &ForwardOptions {
                keep_cache: true,
                tracker: None,
            },
        )?;
        let cache = fw.cache.expect("cache kept");
        let mut maxima: Vec<Option<Vec<f32>>> = vec![None; layout.len()];
        for li in cache.linear_inputs(&layout) {
            let mut m = vec![0.0f32; li.cols];
            for row in li.data.chunks_exact(li.cols) {
                for (a, v) in m.iter_mut().zip(row) {
                    *a = a.max(v.abs());
                }
            }
            maxima[li.param] = Some(m);
        }
        maxima
    } else {
        vec![None; layout.len()]
    };

    let quantize_one = |idx: usize, w: &[f32], calib_x: Option<(&[f32], usize)>| -> Result<QuantizedTensor> {
        let shape = &layout.specs[idx].shape;
        let (rows, cols) = (shape[0], shape[1]);
        let data = match spec.scheme {
            Scheme::Gptq if calib_x.is_some() => {
                let (x, m) = calib_x.expect("checked");
                QuantData::Grid(gptq_layer(w, rows, cols, x, m, spec.bits, spec.group_size, spec.damping)?)
            }
            Scheme::Gptq | Scheme::Affine => QuantData::Grid(rtn_layer(w, rows, cols, spec.bits, spec.group_size)?),
            Scheme::Absmax8 => QuantData::Absmax(absmax_int8(
                w,
                rows,
                cols,
                feature_max[idx].as_deref(),
                spec.outlier_threshold,
            )?),
            Scheme::Nf4 => QuantData::Nf4(nf4_quantize(w, spec.nf4_block, spec.nf4_scale_block)),
        };
        let scheme = match (&data, spec.scheme) {
            (QuantData::Grid(_), Scheme::Gptq) if calib_x.is_none() => Scheme::Affine,
            _ => spec.scheme,
        };
        Ok(QuantizedTensor { scheme, rows, cols, data })
    };

    for group in &order {
        let x = if spec.scheme == Scheme::Gptq {
            Some(calibration_inputs(&work, calib, group[0])?)
        } else {
            None
        };
        for &idx in group {
            let q = quantize_one(idx, work.params()[idx].data(), x.as_ref().map(|(d, m)| (d.as_slice(), *m)))?;
            work.params_mut()[idx].data_mut().copy_from_slice(&q.dequantize());
            stored[idx] = Some(q);
        }
    }
    for idx in [layout.tok_emb, layout.pos_emb] {
        stored[idx] = Some(quantize_one(idx, model.params()[idx].data(), None)?);
    }

    let params = model
        .params()
        .iter()
        .zip(stored)
        .map(|(t, q)| match q {
            Some(q) => Stored::Quant(q),
            None => Stored::Float(t.clone()),
        })
        .collect();
    Ok(QuantizedModel {
        config: model.config().clone(),
        layout,
        params,
    })
}

impl QuantizedModel {
    pub fn params(&self) -> &[Stored] {
        &self.params
    }

    /// The float model obtained by dequantizing every parameter.
    pub fn dequantized(&self) -> Result<MiniMetricModel> {
        let params = self
            .params
            .iter()
            .zip(&self.layout.specs)
            .map(|(p, s)| match p {
                Stored::Float(t) => Ok(t.clone()),
                Stored::Quant(q) => Tensor::new(s.shape.clone(), q.dequantize()),
            })
            .collect::<Result<Vec<_>>>()?;
        MiniMetricModel::from_params(self.config.clone(), params)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(serde_json::to_value(&self.config)?);
        for (p, s) in self.params.iter().zip(&self.layout.specs) {
            match p {
                Stored::Float(t) => c.push_f32(&s.name, t),
                Stored::Quant(q) => {
                    let (desc, bytes) = q.to_parts();
                    c.push_packed(&s.name, s.shape.clone(), desc, &bytes);
                }
            }
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
                if e.shape != s.shape {
                    return Err(Error::format(e.offset, format!("{}: shape {:?}, expected {:?}", s.name, e.shape, s.shape)));
                }
                match &e.quant {
                    None => Ok(Stored::Float(c.read_f32(e)?)),
                    Some(desc) => Ok(Stored::Quant(
                        QuantizedTensor::from_parts(desc, &e.shape, c.bytes_of(e))
                            .map_err(|err| Error::format(e.offset, format!("{}: {err}", s.name)))?,
                    )),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layout, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }
}

impl ParamSource<f32> for QuantizedModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn param(&self, idx: usize) -> Cow<'_, [f32]> {
        match &self.params[idx] {
            Stored::Float(t) => Cow::Borrowed(t.data()),
            Stored::Quant(q) => Cow::Owned(q.dequantize()),
        }
    }

    fn gather_rows(&self, idx: usize, rows: &[usize]) -> Vec<f32> {
        match &self.params[idx] {
            Stored::Float(t) => {
                let cols = t.shape()[1];
                rows.iter().flat_map(|&r| t.data()[r * cols..(r + 1) * cols].iter().copied()).collect()
            }
            Stored::Quant(q) => q.dequantize_rows(rows),
        }
    }

    fn resident_bytes(&self) -> usize {
        self.params
            .iter()
            .map(|p| match p {
                Stored::Float(t) => t.numel() * 4,
                Stored::Quant(q) => q.storage_bytes(),
            })
            .sum()
    }
}

/// A float or quantized model loaded from a container.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Float(MiniMetricModel),
    Quantized(QuantizedModel),
}

impl AnyModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes)?;
        if c.header.tensors.iter().any(|e| e.quant.is_some()) {
            Ok(AnyModel::Quantized(QuantizedModel::from_container(&c)?))
        } else {
            Ok(AnyModel::Float(MiniMetricModel::from_container(&c)?))
        }
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            AnyModel::Float(m) => m.to_bytes(),
            AnyModel::Quantized(m) => m.to_bytes(),
        }
    }

    pub fn as_float(&self) -> Option<&MiniMetricModel> {
        match self {
            AnyModel::Float(m) => Some(m),
            AnyModel::Quantized(_) => None,
        }
    }
}

impl ParamSource<f32> for AnyModel {
    fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Float(m) => m.config(),
            AnyModel::Quantized(m) => m.config(),
        }
    }

    fn layout(&self) -> &Layout {
        match self {
            AnyModel::Float(m) => m.layout(),
            AnyModel::Quantized(m) => ParamSource::layout(m),
        }
    }

    fn param(&self, idx: usize) -> Cow<'_, [f32]> {
        match self {
            AnyModel::Float(m) => m.param(idx),
            AnyModel::Quantized(m) => m.param(idx),
        }
    }

    fn gather_rows(&self, idx: usize, rows: &[usize]) -> Vec<f32> {
        match self {
            AnyModel::Float(m) => m.gather_rows(idx, rows),
            AnyModel::Quantized(m) => m.gather_rows(idx, rows),
        }
    }

    fn resident_bytes(&self) -> usize {
        match self {
            AnyModel::Float(m) => m.resident_bytes(),
            AnyModel::Quantized(m) => m.resident_bytes(),
        }
    }
}
