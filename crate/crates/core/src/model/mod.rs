//! CNN graph description, real-valued parameter containers and the on-disk
//! formats for descriptors, weight blobs and quantized checkpoints.

mod blob;
pub mod checkpoint;
pub mod descriptor;
pub mod zoo;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{LayerQuant, QuantError, WeightFormat};

pub use blob::{read_weight_blob, write_weight_blob};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed descriptor: {0}")]
    MalformedDescriptor(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weight blob holds {actual} bytes, network needs {expected}")]
    BlobSizeMismatch { expected: usize, actual: usize },
    #[error("invalid layer {index}: {reason}")]
    InvalidLayer { index: usize, reason: String },
    #[error("non-finite parameter in layer {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    #[serde(rename = "dw")]
    DepthwiseConv,
    #[serde(rename = "pw")]
    PointwiseConv,
    #[serde(rename = "avgpool")]
    AvgPool,
    #[serde(rename = "fc")]
    FullyConnected,
}

impl LayerKind {
    /// Short tag used in descriptors, file names and RTL module names.
    pub fn tag(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::DepthwiseConv => "dw",
            LayerKind::PointwiseConv => "pw",
            LayerKind::AvgPool => "avgpool",
            LayerKind::FullyConnected => "fc",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "conv" => LayerKind::Conv,
            "dw" => LayerKind::DepthwiseConv,
            "pw" => LayerKind::PointwiseConv,
            "avgpool" => LayerKind::AvgPool,
            "fc" => LayerKind::FullyConnected,
            _ => return None,
        })
    }

    /// Per-channel layers: depthwise convolution and pooling.
    pub fn is_channelwise(self) -> bool {
        matches!(self, LayerKind::DepthwiseConv | LayerKind::AvgPool)
    }

    /// Row label in the style of the unroll table ("Conv dw", "Avg Pool", ...).
    pub fn table_label(self) -> &'static str {
        match self {
            LayerKind::Conv => "Conv",
            LayerKind::DepthwiseConv => "Conv dw",
            LayerKind::PointwiseConv => "Conv pw",
            LayerKind::AvgPool => "Avg Pool",
            LayerKind::FullyConnected => "FC",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One layer of the linear pipeline. Kernels are square.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub padding: usize,
    pub has_bn: bool,
    pub has_relu: bool,
}

/// floor((n + 2p - k) / s) + 1, or `None` when the window does not fit.
pub fn output_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl LayerSpec {
    pub fn out_height(&self) -> usize {
        output_extent(self.in_height, self.kernel, self.stride, self.padding).unwrap_or(0)
    }

    pub fn out_width(&self) -> usize {
        output_extent(self.in_width, self.kernel, self.stride, self.padding).unwrap_or(0)
    }

    pub fn in_shape(&self) -> Shape3 {
        Shape3::new(self.in_height, self.in_width, self.in_channels)
    }

    pub fn out_shape(&self) -> Shape3 {
        Shape3::new(self.out_height(), self.out_width(), self.out_channels)
    }

    pub fn has_weights(&self) -> bool {
        self.kind != LayerKind::AvgPool
    }

    /// OIHW weight shape. Depthwise uses O = 1 with one K×K filter per channel.
    pub fn weight_shape(&self) -> Option<[usize; 4]> {
        let k = self.kernel;
        match self.kind {
            LayerKind::AvgPool => None,
            LayerKind::DepthwiseConv => Some([1, self.in_channels, k, k]),
            _ => Some([self.out_channels, self.in_channels, k, k]),
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().map_or(0, |s| s.iter().product())
    }

    /// Weights plus γ, β, μ, σ per output channel when BN is present.
    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.has_bn { 4 * self.out_channels } else { 0 }
    }

    /// Number of input terms summed into one output value.
    pub fn fan_in(&self) -> usize {
        let taps = self.kernel * self.kernel;
        if self.kind.is_channelwise() {
            taps
        } else {
            taps * self.in_channels
        }
    }

    pub fn validate(&self, index: usize) -> Result<(), ModelError> {
        let bad = |reason: String| Err(ModelError::InvalidLayer { index, reason });
        if self.kernel == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("kernel and channel counts must be positive".into());
        }
        if self.in_height == 0 || self.in_width == 0 {
            return bad("input spatial size must be positive".into());
        }
        if !(1..=2).contains(&self.stride) {
            return bad(format!("stride {} not in {{1, 2}}", self.stride));
        }
        if self.padding >= self.kernel {
            return bad(format!("padding {} must be smaller than kernel {}", self.padding, self.kernel));
        }
        match self.kind {
            LayerKind::PointwiseConv if self.kernel != 1 || self.padding != 0 => {
                return bad("pointwise convolution requires K = 1 and P = 0".into())
            }
            LayerKind::DepthwiseConv | LayerKind::AvgPool if self.in_channels != self.out_channels => {
                return bad("channelwise layer requires C = C'".into())
            }
            LayerKind::AvgPool | LayerKind::FullyConnected if self.has_bn => {
                return bad("pooling and fully connected layers carry no batch norm".into())
            }
            LayerKind::FullyConnected
                if self.kernel != 1 || self.padding != 0 || self.in_height != 1 || self.in_width != 1 =>
            {
                return bad("fully connected layer is a 1x1 convolution over a 1x1 map".into())
            }
            _ => {}
        }
        if self.out_height() == 0 || self.out_width() == 0 {
            return bad("output spatial size would be empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape3 {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// A shape-validated linear chain of layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: Shape3,
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(
        name: impl Into<String>,
        input_shape: Shape3,
        class_count: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self, ModelError> {
        let net = Self { name: name.into(), input_shape, class_count, layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_shape.is_empty() {
            return Err(ModelError::ShapeMismatch("empty input shape".into()));
        }
        let mut shape = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_shape() != shape {
                return Err(ModelError::ShapeMismatch(format!(
                    "layer {i} expects input {} but receives {}",
                    layer.in_shape(),
                    shape
                )));
            }
            layer.validate(i)?;
            shape = layer.out_shape();
        }
        Ok(())
    }

    pub fn output_shape(&self) -> Shape3 {
        self.layers.last().map_or(self.input_shape, LayerSpec::out_shape)
    }

    /// The final layer emits raw accumulator logits when it is fully connected.
    pub fn has_logit_layer(&self) -> bool {
        self.layers.last().is_some_and(|l| l.kind == LayerKind::FullyConnected)
    }

    pub fn is_logit_layer(&self, index: usize) -> bool {
        index + 1 == self.layers.len() && self.has_logit_layer()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }
}

/// Dense real tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RealTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ModelError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Quantized weights of one layer: raw codewords under a layer-wide format.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<u16>,
    pub format: WeightFormat,
}

impl QuantTensor {
    /// Quantizes a real tensor; bias/point are fitted to its extrema.
    pub fn quantize(weights: &RealTensor, q: LayerQuant) -> Result<Self, QuantError> {
        let format = WeightFormat::fit(q, &weights.data)?;
        Ok(Self::with_format(weights, format))
    }

    pub fn with_format(weights: &RealTensor, format: WeightFormat) -> Self {
        let codes = weights.data.iter().map(|&w| format.quantize(w)).collect();
        Self { shape: weights.shape.clone(), codes, format }
    }

    pub fn decode(&self) -> RealTensor {
        RealTensor { shape: self.shape.clone(), data: self.codes.iter().map(|&c| self.format.decode(c)).collect() }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.codes.len() == self.shape.iter().product::<usize>() && self.codes.iter().all(|&c| self.format.is_valid(c))
    }
}

/// Inference-time batch-norm statistics, one entry per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            sigma: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Option<RealTensor>,
    pub bn: Option<BnParams>,
}

/// Real-valued parameters θ of a network, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// Checks that every tensor matches the layer it belongs to.
    pub fn check(&self, net: &NetworkSpec) -> Result<(), ModelError> {
        if self.layers.len() != net.layers.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} parameter sets for {} layers",
                self.layers.len(),
                net.layers.len()
            )));
        }
        for (i, (spec, p)) in net.layers.iter().zip(&self.layers).enumerate() {
            match (spec.weight_shape(), &p.weights) {
                (None, None) => {}
                (Some(shape), Some(w)) if w.shape == shape => {
                    if !w.is_finite() {
                        return Err(ModelError::NonFinite(i));
                    }
                }
                _ => return Err(ModelError::ShapeMismatch(format!("layer {i} weight tensor"))),
            }
            match (spec.has_bn, &p.bn) {
                (false, None) => {}
                (true, Some(bn)) if bn.channels() == spec.out_channels => {}
                _ => return Err(ModelError::ShapeMismatch(format!("layer {i} batch norm"))),
            }
        }
        Ok(())
    }
}

/// Loads a descriptor and its weight blob.
pub fn load_model(
    descriptor_path: impl AsRef<Path>,
    weights_path: impl AsRef<Path>,
) -> Result<(NetworkSpec, ModelParams), ModelError> {
    let text = std::fs::read_to_string(descriptor_path)?;
    let desc = descriptor::parse(&text)?;
    let bytes = std::fs::read(weights_path)?;
    let params = read_weight_blob(&desc.network, &bytes)?;
    Ok((desc.network, params))
}
