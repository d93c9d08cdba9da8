//! Binary checkpoint of a quantized network.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "TMTO" | version u16 | layer count u16
//! input height u16 | width u16 | channels u16 | classes u16 | name len u16 | name utf-8
//! per layer:
//!   arith u8 (0 fixed, 1 shift, 0xff none) | bits u8 | scale field i8
//!   kind u8 | kernel u8 | stride u8 | padding u8 | in ch u16 | out ch u16 | flags u8
//!   codeword count u32 | codewords packed LSB first, `bits` each
//!   if batch norm: out ch × (scale i16, offset i16)
//! crc32 of everything above
//! ```
//!
//! The scale field is the fixed-point position for fixed layers and
//! `b - e_max` for shift layers, so the common 8-bit bias fits in a byte.

use thiserror::Error;

use super::{LayerKind, LayerSpec, ModelError, NetworkSpec, QuantTensor, Shape3};
use crate::engine::{QuantizedLayer, QuantizedModel};
use crate::quant::{FixedFormat, FusedAffine, LayerQuant, QuantConfig, ShiftLayerParams, WeightFormat};

pub const MAGIC: &[u8; 4] = b"TMTO";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint is corrupt or truncated")]
    CorruptChecksum,
    #[error("checkpoint field out of range: {0}")]
    FieldOverflow(String),
    #[error("checkpoint content is invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const ARITH_FIXED: u8 = 0;
const ARITH_SHIFT: u8 = 1;
const ARITH_NONE: u8 = 0xff;

fn kind_code(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::Conv => 0,
        LayerKind::DepthwiseConv => 1,
        LayerKind::PointwiseConv => 2,
        LayerKind::AvgPool => 3,
        LayerKind::FullyConnected => 4,
    }
}

fn kind_from_code(code: u8) -> Option<LayerKind> {
    Some(match code {
        0 => LayerKind::Conv,
        1 => LayerKind::DepthwiseConv,
        2 => LayerKind::PointwiseConv,
        3 => LayerKind::AvgPool,
        4 => LayerKind::FullyConnected,
        _ => return None,
    })
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T, CheckpointError> {
    T::try_from(v).map_err(|_| CheckpointError::FieldOverflow(format!("{what} = {v}")))
}

pub fn encode(model: &QuantizedModel) -> Result<Vec<u8>, CheckpointError> {
    model.check().map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let net = &model.net;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(net.layers.len(), "layer count")?.to_le_bytes());
    for v in [net.input_shape.height, net.input_shape.width, net.input_shape.channels, net.class_count] {
        out.extend_from_slice(&narrow::<u16>(v, "network dimension")?.to_le_bytes());
    }
    out.extend_from_slice(&narrow::<u16>(net.name.len(), "name length")?.to_le_bytes());
    out.extend_from_slice(net.name.as_bytes());

    for (spec, layer) in net.layers.iter().zip(&model.layers) {
        match &layer.weights {
            Some(t) => {
                let (tag, field) = match t.format {
                    WeightFormat::Fixed(f) => (ARITH_FIXED, f.point),
                    WeightFormat::Shift(p) => (ARITH_SHIFT, p.bias - p.max_exponent()),
                };
                let field = i8::try_from(field).map_err(|_| CheckpointError::FieldOverflow(format!("scale field {field}")))?;
                out.extend_from_slice(&[tag, t.format.bits(), field as u8]);
            }
            None => out.extend_from_slice(&[ARITH_NONE, 0, 0]),
        }
        out.extend_from_slice(&[
            kind_code(spec.kind),
            narrow::<u8>(spec.kernel, "kernel")?,
            narrow::<u8>(spec.stride, "stride")?,
            narrow::<u8>(spec.padding, "padding")?,
        ]);
        out.extend_from_slice(&narrow::<u16>(spec.in_channels, "channels")?.to_le_bytes());
        out.extend_from_slice(&narrow::<u16>(spec.out_channels, "channels")?.to_le_bytes());
        out.push(spec.has_bn as u8 | (spec.has_relu as u8) << 1);

        let (codes, bits): (&[u16], u8) = match &layer.weights {
            Some(t) => (&t.codes, t.format.bits()),
            None => (&[], 0),
        };
        out.extend_from_slice(&narrow::<u32>(codes.len(), "codeword count")?.to_le_bytes());
        out.extend_from_slice(&pack(codes, bits));
        if let Some(bn) = &layer.bn {
            for a in bn {
                out.extend_from_slice(&a.scale.to_le_bytes());
                out.extend_from_slice(&a.offset.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Packs `bits`-wide codewords, least significant bit first.
pub fn pack(codes: &[u16], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for &c in codes {
        for b in 0..bits as usize {
            if c >> b & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack(bytes: &[u8], bits: u8, count: usize) -> Vec<u16> {
    let mut pos = 0usize;
    (0..count)
        .map(|_| {
            let mut c = 0u16;
            for b in 0..bits as usize {
                if bytes[pos / 8] >> (pos % 8) & 1 == 1 {
                    c |= 1 << b;
                }
                pos += 1;
            }
            c
        })
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::CorruptChecksum)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn i16(&mut self) -> Result<i16, CheckpointError> {
        Ok(self.u16()? as i16)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<QuantizedModel, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() >= 6 {
        let found = u16::from_le_bytes([bytes[4], bytes[5]]);
        if found != VERSION {
            return Err(CheckpointError::VersionMismatch { found, expected: VERSION });
        }
    }
    if bytes.len() < 10 {
        return Err(CheckpointError::CorruptChecksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]) {
        return Err(CheckpointError::CorruptChecksum);
    }

    let invalid = |m: String| CheckpointError::Invalid(m);
    let mut r = Reader { bytes: body, pos: 6 };
    let layer_count = r.u16()? as usize;
    let input = Shape3::new(r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
    let classes = r.u16()? as usize;
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| invalid("name is not utf-8".into()))?.to_string();

    let mut spatial = (input.height, input.width);
    let mut specs = Vec::with_capacity(layer_count);
    let mut layers = Vec::with_capacity(layer_count);
    let mut config = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let (tag, bits, field) = (r.u8()?, r.u8()?, r.u8()? as i8 as i32);
        let kind = kind_from_code(r.u8()?).ok_or_else(|| invalid(format!("layer {i}: unknown kind")))?;
        let (kernel, stride, padding) = (r.u8()? as usize, r.u8()? as usize, r.u8()? as usize);
        let (in_channels, out_channels) = (r.u16()? as usize, r.u16()? as usize);
        let flags = r.u8()?;
        let spec = LayerSpec {
            kind,
            kernel,
            stride,
            in_channels,
            out_channels,
            in_height: spatial.0,
            in_width: spatial.1,
            padding,
            has_bn: flags & 1 != 0,
            has_relu: flags & 2 != 0,
        };
        spec.validate(i)?;
        spatial = (spec.out_height(), spec.out_width());

        let format = match tag {
            ARITH_NONE => None,
            ARITH_FIXED | ARITH_SHIFT if (crate::quant::MIN_BITS..=crate::quant::MAX_BITS).contains(&bits) => {
                Some(if tag == ARITH_FIXED {
                    WeightFormat::Fixed(FixedFormat::new(bits, field))
                } else {
                    let e_max = crate::quant::shift_max_exponent(bits);
                    WeightFormat::Shift(ShiftLayerParams::new(bits, field + e_max))
                })
            }
            _ => return Err(invalid(format!("layer {i}: bad arithmetic tag {tag} / width {bits}"))),
        };
        let count = r.u32()? as usize;
        let packed_bits = format.map_or(0, |f| f.bits());
        let packed = r.take((count * packed_bits as usize).div_ceil(8))?;
        let weights = match (format, spec.weight_shape()) {
            (Some(format), Some(shape)) => {
                let t = QuantTensor { shape: shape.to_vec(), codes: unpack(packed, packed_bits, count), format };
                if !t.is_valid() {
                    return Err(invalid(format!("layer {i}: codewords do not match the weight shape")));
                }
                Some(t)
            }
            (None, None) if count == 0 => None,
            _ => return Err(invalid(format!("layer {i}: weights disagree with layer kind"))),
        };
        let bn = if spec.has_bn {
            let mut v = Vec::with_capacity(out_channels);
            for _ in 0..out_channels {
                v.push(FusedAffine { scale: r.i16()?, offset: r.i16()? });
            }
            Some(v)
        } else {
            None
        };
        config.push(format.map(|f| LayerQuant::new(f.arith(), f.bits())));
        specs.push(spec);
        layers.push(QuantizedLayer { weights, bn });
    }
    if r.pos != body.len() {
        return Err(invalid("trailing bytes".into()));
    }
    let net = NetworkSpec::new(name, input, classes, specs)?;
    let model = QuantizedModel { net, config: QuantConfig { layers: config }, layers };
    model.check().map_err(|e| invalid(e.to_string()))?;
    Ok(model)
}

pub fn save(model: &QuantizedModel, path: impl AsRef<std::path::Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<std::path::Path>) -> Result<QuantizedModel, CheckpointError> {
    decode(&std::fs::read(path)?)
}
