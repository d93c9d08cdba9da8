//! Float and quantization-aware training.
//!
//! The quantized forward pass mirrors the integer engine in f64: weights go
//! through their layer format, batch norm uses the fused 8.8 constants and
//! activations snap to the 3.5 grid. Gradients pass straight through the
//! weight quantizer and through the activation quantizer inside its range.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::dataset::{argmax, Dataset};
use super::{evaluate, EngineError, EvalResult, QuantizedModel};
use crate::model::{BnParams, LayerKind, LayerParams, LayerSpec, ModelParams, NetworkSpec, RealTensor};
use crate::quant::{self, pow2, QuantConfig, ACT_FRAC_BITS, ACT_MAX_CODE};

#[derive(Debug, Clone, Copy)]
pub enum Precision<'a> {
    Float,
    Quantized(&'a QuantConfig),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 3, learning_rate: 0.05, batch_size: 16, seed: 0 }
    }
}

/// He-normal weights and identity batch norm.
pub fn init_params(net: &NetworkSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = net
        .layers
        .iter()
        .map(|spec| {
            let weights = spec.weight_shape().map(|shape| {
                let std = (2.0 / spec.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let data = (0..shape.iter().product()).map(|_| normal.sample(&mut rng)).collect();
                RealTensor::new(shape.to_vec(), data).expect("shape matches")
            });
            LayerParams { weights, bn: spec.has_bn.then(|| BnParams::identity(spec.out_channels)) }
        })
        .collect();
    ModelParams { layers }
}

/// Per-layer effective values used by one forward pass.
struct Prepared {
    weights: Vec<Option<Vec<f64>>>,
    affine: Vec<Option<Vec<(f64, f64)>>>,
    quantized: bool,
}

fn prepare(net: &NetworkSpec, params: &ModelParams, precision: Precision) -> Result<Prepared, EngineError> {
    let mut weights = Vec::with_capacity(net.layers.len());
    let mut affine = Vec::with_capacity(net.layers.len());
    for (i, p) in params.layers.iter().enumerate() {
        let w = match (&p.weights, precision) {
            (None, _) => None,
            (Some(w), Precision::Float) => Some(w.data.clone()),
            (Some(w), Precision::Quantized(cfg)) => {
                let q = cfg.get(i).ok_or_else(|| EngineError::Inconsistent(format!("layer {i} lacks a format")))?;
                let fmt = quant::WeightFormat::fit(q, &w.data)?;
                Some(w.data.iter().map(|&v| fmt.decode(fmt.quantize(v))).collect())
            }
        };
        let a = match (&p.bn, precision) {
            (None, _) => None,
            (Some(bn), Precision::Float) => Some(
                (0..bn.channels())
                    .map(|c| {
                        let s = bn.gamma[c] / bn.sigma[c];
                        (s, bn.beta[c] - s * bn.mean[c])
                    })
                    .collect(),
            ),
            (Some(bn), Precision::Quantized(_)) => {
                Some(quant::fuse_bn(bn)?.iter().map(|f| (f.scale_value(), f.offset_value())).collect())
            }
        };
        weights.push(w);
        affine.push(a);
    }
    Ok(Prepared { weights, affine, quantized: matches!(precision, Precision::Quantized(_)) })
}

/// Visits every (output index, input index, weight index) triple of a layer.
/// Pooling passes `usize::MAX` as the weight index.
fn for_each_tap(spec: &LayerSpec, mut f: impl FnMut(usize, usize, usize)) {
    let (h, w, c) = (spec.in_height as isize, spec.in_width as isize, spec.in_channels);
    let (oh, ow, co) = (spec.out_height(), spec.out_width(), spec.out_channels);
    let (k, s, p) = (spec.kernel, spec.stride as isize, spec.padding as isize);
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * co;
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
                    let ibase = (iy as usize * w as usize + ix as usize) * c;
                    match spec.kind {
                        LayerKind::AvgPool => (0..c).for_each(|ch| f(obase + ch, ibase + ch, usize::MAX)),
                        LayerKind::DepthwiseConv => {
                            (0..c).for_each(|ch| f(obase + ch, ibase + ch, (ch * k + ky) * k + kx))
                        }
                        _ => {
                            for o in 0..co {
                                for i in 0..c {
                                    f(obase + o, ibase + i, ((o * c + i) * k + ky) * k + kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn linear_forward(spec: &LayerSpec, w: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; spec.out_shape().len()];
    let inv_area = 1.0 / (spec.kernel * spec.kernel) as f64;
    for_each_tap(spec, |o, i, widx| {
        z[o] += x[i] * w.map_or(inv_area, |w| w[widx]);
    });
    z
}

fn linear_backward(spec: &LayerSpec, w: Option<&[f64]>, x: &[f64], dz: &[f64], dw: Option<&mut [f64]>) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    let inv_area = 1.0 / (spec.kernel * spec.kernel) as f64;
    match (w, dw) {
        (Some(w), Some(dw)) => for_each_tap(spec, |o, i, widx| {
            dw[widx] += dz[o] * x[i];
            dx[i] += dz[o] * w[widx];
        }),
        _ => for_each_tap(spec, |o, i, _| dx[i] += dz[o] * inv_area),
    }
    dx
}

/// Output nonlinearity: returns the activation and whether gradient passes.
fn activate(spec: &LayerSpec, y: f64, quantized: bool) -> (f64, bool) {
    if quantized {
        let code = (y * pow2(ACT_FRAC_BITS)).round();
        let top = ACT_MAX_CODE as f64;
        let pass = code >= 0.0 && code <= top;
        (code.clamp(0.0, top) * pow2(-ACT_FRAC_BITS), pass)
    } else if spec.has_relu {
        (y.max(0.0), y > 0.0)
    } else {
        (y, true)
    }
}

struct Trace {
    inputs: Vec<Vec<f64>>,
    masks: Vec<Vec<bool>>,
    logits: Vec<f64>,
}

fn forward(net: &NetworkSpec, prep: &Prepared, image: &[u8]) -> Trace {
    let mut x: Vec<f64> = image.iter().map(|&v| v as f64 * pow2(-ACT_FRAC_BITS)).collect();
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut masks = Vec::with_capacity(net.layers.len());
    for (i, spec) in net.layers.iter().enumerate() {
        let z = linear_forward(spec, prep.weights[i].as_deref(), &x);
        inputs.push(std::mem::take(&mut x));
        if net.is_logit_layer(i) {
            return Trace { inputs, masks, logits: z };
        }
        let c_out = spec.out_channels;
        let (out, mask): (Vec<f64>, Vec<bool>) = z
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let y = prep.affine[i].as_ref().map_or(v, |a| {
                    let (s, b) = a[idx % c_out];
                    s * v + b
                });
                activate(spec, y, prep.quantized)
            })
            .unzip();
        masks.push(mask);
        x = out;
    }
    Trace { inputs, masks, logits: x }
}

/// Real-valued logits under the given precision.
pub fn float_logits(net: &NetworkSpec, params: &ModelParams, precision: Precision, image: &[u8]) -> Vec<f64> {
    let prep = prepare(net, params, precision).expect("parameters match the network");
    forward(net, &prep, image).logits
}

fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let grad = exps.iter().enumerate().map(|(i, e)| e / sum - (i == label) as u8 as f64).collect();
    (sum.ln() + m - logits[label], grad)
}

/// Loss and weight gradients for one sample.
fn sample_grad(net: &NetworkSpec, prep: &Prepared, image: &[u8], label: usize) -> (f64, Vec<Option<Vec<f64>>>) {
    let trace = forward(net, prep, image);
    let (loss, mut d) = softmax_xent(&trace.logits, label);
    let mut grads: Vec<Option<Vec<f64>>> = prep.weights.iter().map(|w| w.as_ref().map(|w| vec![0.0; w.len()])).collect();
    for i in (0..net.layers.len()).rev() {
        let spec = &net.layers[i];
        if !net.is_logit_layer(i) {
            let c_out = spec.out_channels;
            for (idx, g) in d.iter_mut().enumerate() {
                if !trace.masks[i][idx] {
                    *g = 0.0;
                } else if let Some(a) = &prep.affine[i] {
                    *g *= a[idx % c_out].0;
                }
            }
        }
        d = linear_backward(spec, prep.weights[i].as_deref(), &trace.inputs[i], &d, grads[i].as_deref_mut());
    }
    (loss, grads)
}

/// Minibatch SGD on the weights; batch norm statistics stay fixed.
pub fn train(
    net: &NetworkSpec,
    params: &ModelParams,
    precision: Precision,
    data: &Dataset,
    opts: &TrainOptions,
) -> Result<ModelParams, EngineError> {
    params.check(net)?;
    if data.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    let mut theta = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size.max(1)) {
            let prep = prepare(net, &theta, precision)?;
            let results: Vec<_> = batch
                .par_iter()
                .map(|&s| {
                    let sample = &data.samples[s];
                    sample_grad(net, &prep, &sample.image, sample.label as usize)
                })
                .collect();
            let scale = opts.learning_rate / batch.len() as f64;
            for (loss, grads) in results {
                if !loss.is_finite() {
                    return Err(EngineError::NonFiniteLoss { epoch });
                }
                for (layer, g) in theta.layers.iter_mut().zip(grads) {
                    if let (Some(w), Some(g)) = (layer.weights.as_mut(), g) {
                        for (wv, gv) in w.data.iter_mut().zip(g) {
                            *wv -= scale * gv;
                        }
                    }
                }
            }
            if theta.layers.iter().any(|l| l.weights.as_ref().is_some_and(|w| !w.is_finite())) {
                return Err(EngineError::NonFiniteLoss { epoch });
            }
        }
    }
    Ok(theta)
}

/// Quantization-aware fine-tuning for `config`, then bit-exact evaluation of
/// the quantized result on `val`. Zero epochs returns θ unchanged.
pub fn finetune_ste(
    net: &NetworkSpec,
    params: &ModelParams,
    config: &QuantConfig,
    train_set: &Dataset,
    val: &Dataset,
    opts: &TrainOptions,
) -> Result<(ModelParams, EvalResult), EngineError> {
    let theta = if opts.epochs == 0 {
        params.clone()
    } else {
        train(net, params, Precision::Quantized(config), train_set, opts)?
    };
    let model = QuantizedModel::quantize(net, &theta, config)?;
    let acc = evaluate(&model, val)?;
    Ok((theta, acc))
}

/// Accuracy of the f64 forward pass.
pub fn evaluate_float(net: &NetworkSpec, params: &ModelParams, precision: Precision, data: &Dataset) -> Result<EvalResult, EngineError> {
    if data.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    params.check(net)?;
    let prep = prepare(net, params, precision)?;
    let (t1, t5) = data
        .samples
        .par_iter()
        .map(|s| {
            let logits = forward(net, &prep, &s.image).logits;
            let label = s.label as usize;
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            ((argmax(&logits) == label) as usize, idx.iter().take(5).any(|&c| c == label) as usize)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = data.len();
    Ok(EvalResult { top1: t1 as f64 / n as f64, top5: t5 as f64 / n as f64, sample_count: n })
}
