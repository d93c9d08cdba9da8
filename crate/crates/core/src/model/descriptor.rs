//! Model descriptor: a versioned TOML document.
//!
//! ```toml
//! format = "flatstream-net"
//! version = 1
//! name = "example"
//! classes = 10
//! input = { height = 32, width = 32, channels = 3 }
//!
//! [[layers]]
//! kind = "conv"          # conv | dw | pw | avgpool | fc
//! kernel = 3
//! stride = 2
//! padding = 1
//! in_channels = 3
//! out_channels = 16
//! bn = true
//! relu = true
//! arith = "shift"        # optional quantization fragment: shift | fixed
//! bits = 4
//! ```
//!
//! Spatial input sizes of each layer are inferred from the chain. The
//! quantization fragment is either present on every weighted layer or on none.

use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerSpec, ModelError, NetworkSpec, Shape3};
use crate::quant::{Arithmetic, LayerQuant, QuantConfig};

pub const FORMAT_TAG: &str = "flatstream-net";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    name: String,
    classes: usize,
    input: InputDoc,
    #[serde(default)]
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputDoc {
    height: usize,
    width: usize,
    channels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    kind: LayerKind,
    kernel: usize,
    stride: usize,
    #[serde(default)]
    padding: usize,
    in_channels: usize,
    out_channels: usize,
    #[serde(default)]
    bn: bool,
    #[serde(default)]
    relu: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arith: Option<Arithmetic>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bits: Option<u8>,
}

/// A parsed descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub network: NetworkSpec,
    pub quant: Option<QuantConfig>,
}

pub fn parse(text: &str) -> Result<Descriptor, ModelError> {
    let doc: Document = toml::from_str(text).map_err(|e| ModelError::MalformedDescriptor(e.message().to_string()))?;
    if doc.format != FORMAT_TAG {
        return Err(ModelError::MalformedDescriptor(format!("unknown format tag {:?}", doc.format)));
    }
    if doc.version != SCHEMA_VERSION {
        return Err(ModelError::MalformedDescriptor(format!("unsupported schema version {}", doc.version)));
    }
    let input = Shape3::new(doc.input.height, doc.input.width, doc.input.channels);
    let mut spatial = (input.height, input.width);
    let mut layers = Vec::with_capacity(doc.layers.len());
    let mut quant = Vec::with_capacity(doc.layers.len());
    for (i, l) in doc.layers.iter().enumerate() {
        let spec = LayerSpec {
            kind: l.kind,
            kernel: l.kernel,
            stride: l.stride,
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            in_height: spatial.0,
            in_width: spatial.1,
            padding: l.padding,
            has_bn: l.bn,
            has_relu: l.relu,
        };
        spatial = (spec.out_height(), spec.out_width());
        let q = match (l.arith, l.bits) {
            (Some(a), Some(b)) => Some(LayerQuant::new(a, b)),
            (None, None) => None,
            _ => {
                return Err(ModelError::MalformedDescriptor(format!(
                    "layer {i}: `arith` and `bits` must be given together"
                )))
            }
        };
        if q.is_some() && !spec.has_weights() {
            return Err(ModelError::MalformedDescriptor(format!("layer {i}: pooling takes no quantization")));
        }
        layers.push(spec);
        quant.push(q);
    }
    let network = NetworkSpec::new(doc.name, input, doc.classes, layers)?;

    let weighted: Vec<bool> = network.layers.iter().map(LayerSpec::has_weights).collect();
    let given = quant.iter().filter(|q| q.is_some()).count();
    let quant = if given == 0 {
        None
    } else if given == weighted.iter().filter(|w| **w).count() {
        let cfg = QuantConfig { layers: quant };
        if !cfg.check(&network) {
            return Err(ModelError::MalformedDescriptor("quantization bit width out of range".into()));
        }
        Some(cfg)
    } else {
        return Err(ModelError::MalformedDescriptor(
            "quantization fragment must cover every weighted layer".into(),
        ));
    };
    Ok(Descriptor { network, quant })
}

pub fn render(net: &NetworkSpec, quant: Option<&QuantConfig>) -> String {
    let doc = Document {
        format: FORMAT_TAG.to_string(),
        version: SCHEMA_VERSION,
        name: net.name.clone(),
        classes: net.class_count,
        input: InputDoc {
            height: net.input_shape.height,
            width: net.input_shape.width,
            channels: net.input_shape.channels,
        },
        layers: net
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let q = quant.and_then(|q| q.get(i));
                LayerDoc {
                    kind: l.kind,
                    kernel: l.kernel,
                    stride: l.stride,
                    padding: l.padding,
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    bn: l.has_bn,
                    relu: l.has_relu,
                    arith: q.map(|q| q.arith),
                    bits: q.map(|q| q.bits),
                }
            })
            .collect(),
    };
    toml::to_string(&doc).expect("descriptor serializes")
}
