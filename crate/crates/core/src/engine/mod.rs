//! Golden quantized inference: integer convolution, 32-bit accumulation,
//! fused batch norm in 8.8 and requantization to 3.5 activations. The
//! stream simulator must reproduce these outputs bit for bit.

pub mod dataset;
mod kernel;
pub mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LayerSpec, ModelError, ModelParams, NetworkSpec, QuantTensor};
use crate::quant::{self, FusedAffine, IntegerWeights, QuantConfig, QuantError, ACT_FRAC_BITS, ACT_MAX_CODE};

pub(crate) use kernel::{finish_value, Kernel};

pub use dataset::{Dataset, Sample};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("layer {layer}: accumulator bound {bound} does not fit in 32 bits")]
    AccumulatorOverflowRisk { layer: usize, bound: u128 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("inconsistent quantized model: {0}")]
    Inconsistent(String),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub weights: Option<QuantTensor>,
    pub bn: Option<Vec<FusedAffine>>,
}

/// A network with quantized weights and fused batch norm; the payload of a
/// checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub net: NetworkSpec,
    pub config: QuantConfig,
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    /// Quantizes θ under `config`, fitting bias/point per layer and fusing BN.
    pub fn quantize(net: &NetworkSpec, params: &ModelParams, config: &QuantConfig) -> Result<Self, EngineError> {
        params.check(net)?;
        if !config.check(net) {
            return Err(EngineError::Inconsistent("quantization config does not match network".into()));
        }
        let layers = net
            .layers
            .iter()
            .zip(&params.layers)
            .enumerate()
            .map(|(i, (_, p))| {
                let weights = match (&p.weights, config.get(i)) {
                    (Some(w), Some(q)) => Some(QuantTensor::quantize(w, q)?),
                    _ => None,
                };
                let bn = p.bn.as_ref().map(quant::fuse_bn).transpose()?;
                Ok(QuantizedLayer { weights, bn })
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        Ok(Self { net: net.clone(), config: config.clone(), layers })
    }

    pub fn check(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Inconsistent(m));
        if !self.config.check(&self.net) || self.layers.len() != self.net.layers.len() {
            return bad("layer count or config mismatch".into());
        }
        for (i, (spec, layer)) in self.net.layers.iter().zip(&self.layers).enumerate() {
            match (spec.weight_shape(), &layer.weights, self.config.get(i)) {
                (None, None, None) => {}
                (Some(shape), Some(t), Some(q)) => {
                    if t.shape != shape || !t.is_valid() {
                        return bad(format!("layer {i} weight tensor"));
                    }
                    if t.format.arith() != q.arith || t.format.bits() != q.bits {
                        return bad(format!("layer {i} format disagrees with config"));
                    }
                }
                _ => return bad(format!("layer {i} weights")),
            }
            match (&layer.bn, spec.has_bn) {
                (None, false) => {}
                (Some(bn), true) if bn.len() == spec.out_channels => {}
                _ => return bad(format!("layer {i} batch norm")),
            }
        }
        Ok(())
    }

    /// Integer datapaths for every layer, with the static overflow certificate.
    pub fn datapaths(&self) -> Result<Vec<LayerDatapath>, EngineError> {
        self.check()?;
        self.net
            .layers
            .iter()
            .zip(&self.layers)
            .enumerate()
            .map(|(i, (spec, layer))| LayerDatapath::new(i, spec, layer))
            .collect()
    }
}

/// Integer view of one layer: weights at a common binary point and the
/// accumulator's fractional width (5 activation bits + weight bits).
#[derive(Debug, Clone)]
pub struct LayerDatapath {
    pub weights: Option<IntegerWeights>,
    pub acc_frac: i32,
    pub bn: Option<Vec<FusedAffine>>,
}

impl LayerDatapath {
    fn new(index: usize, spec: &LayerSpec, layer: &QuantizedLayer) -> Result<Self, EngineError> {
        let weights = layer.weights.as_ref().map(|t| quant::integer_weights(&t.format, &t.codes));
        let max_mult = weights.as_ref().map_or(1, |w| w.max_abs()) as u128;
        let bound = spec.fan_in() as u128 * ACT_MAX_CODE as u128 * max_mult;
        if bound >= 1u128 << 31 {
            return Err(EngineError::AccumulatorOverflowRisk { layer: index, bound });
        }
        let acc_frac = ACT_FRAC_BITS + weights.as_ref().map_or(0, |w| w.frac_bits);
        Ok(Self { weights, acc_frac, bn: layer.bn.clone() })
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// HWC activation codes after every layer that produces activations.
    pub activations: Vec<Vec<u8>>,
    /// Raw accumulators of a final fully connected layer, otherwise the
    /// final activation codes.
    pub logits: Vec<i64>,
}

impl ForwardOutput {
    /// The stream leaving the last pipeline stage.
    pub fn output_stream(&self) -> Vec<i64> {
        self.logits.clone()
    }
}

/// Bit-exact integer inference of one image (HWC activation codes).
pub fn forward_quant(model: &QuantizedModel, image: &[u8]) -> Result<ForwardOutput, EngineError> {
    let paths = model.datapaths()?;
    forward_with(&model.net, &paths, image)
}

pub(crate) fn forward_with(net: &NetworkSpec, paths: &[LayerDatapath], image: &[u8]) -> Result<ForwardOutput, EngineError> {
    if image.len() != net.input_shape.len() {
        return Err(EngineError::ShapeMismatch(format!(
            "image has {} values, network input {} needs {}",
            image.len(),
            net.input_shape,
            net.input_shape.len()
        )));
    }
    let mut activations = Vec::with_capacity(net.layers.len());
    let mut current: Vec<u8> = image.to_vec();
    for (i, (spec, path)) in net.layers.iter().zip(paths).enumerate() {
        let acc = accumulate(spec, path, &current);
        if net.is_logit_layer(i) {
            return Ok(ForwardOutput { activations, logits: acc.into_iter().map(i64::from).collect() });
        }
        current = finish_layer(spec, path, &acc);
        activations.push(current.clone());
    }
    let logits = current.iter().map(|&c| c as i64).collect();
    Ok(ForwardOutput { activations, logits })
}

fn finish_layer(spec: &LayerSpec, path: &LayerDatapath, acc: &[i32]) -> Vec<u8> {
    let c_out = spec.out_channels;
    acc.iter().enumerate().map(|(idx, &a)| kernel::finish_value(spec, path, idx % c_out, a)).collect()
}

/// Raw accumulators (HWC) of one layer.
fn accumulate(spec: &LayerSpec, path: &LayerDatapath, input: &[u8]) -> Vec<i32> {
    let kern = Kernel::new(spec, path);
    let (h, w, c) = (spec.in_height as isize, spec.in_width as isize, spec.in_channels);
    let (oh, ow, co) = (spec.out_height(), spec.out_width(), spec.out_channels);
    let (k, s, p) = (spec.kernel, spec.stride as isize, spec.padding as isize);
    let mut out = vec![0i32; oh * ow * co];
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            for ky in 0..k {
                let iy = oy as isize * s + ky as isize - p;
                if iy < 0 || iy >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize * s + kx as isize - p;
                    if ix < 0 || ix >= w {
                        continue;
                    }
                    let pixel = &input[(iy * w + ix) as usize * c..][..c];
                    kern.accumulate(acc, ky * k + kx, 0, pixel);
                }
            }
        }
    }
    out
}

/// Accuracy over a labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
    pub sample_count: usize,
}

/// Class indices ordered by descending logit, ties to the lower index.
pub fn ranked_classes(logits: &[i64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].cmp(&logits[a]).then(a.cmp(&b)));
    idx
}

pub fn evaluate(model: &QuantizedModel, data: &Dataset) -> Result<EvalResult, EngineError> {
    if data.samples.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    if data.shape() != model.net.input_shape {
        return Err(EngineError::ShapeMismatch(format!(
            "dataset images are {}, network expects {}",
            data.shape(),
            model.net.input_shape
        )));
    }
    let paths = model.datapaths()?;
    let hits = data
        .samples
        .par_iter()
        .map(|s| {
            let out = forward_with(&model.net, &paths, &s.image)?;
            let ranked = ranked_classes(&out.logits);
            let label = s.label as usize;
            let top1 = ranked.first() == Some(&label);
            let top5 = ranked.iter().take(5).any(|&c| c == label);
            Ok((top1 as usize, top5 as usize))
        })
        .collect::<Result<Vec<_>, EngineError>>()?;
    let (t1, t5) = hits.iter().fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
    let n = data.samples.len();
    Ok(EvalResult { top1: t1 as f64 / n as f64, top5: t5 as f64 / n as f64, sample_count: n })
}
