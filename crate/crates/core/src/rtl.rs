//! SystemVerilog emission from checked-in templates.
//!
//! Output tree:
//!
//! * `top.sv`: the pipeline plus the shared slide-buffer primitive;
//! * `layer_<idx>_<kind>.sv`: one core per layer;
//! * `weights_<idx>.hex`: one codeword per line in hex, in checkpoint order
//!   (`[C'][C][K][K]`, depthwise `[C][K][K]`), for `$readmemh`;
//! * `manifest.txt`: one `key=value` record per layer, written last.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{QuantizedLayer, QuantizedModel};
use crate::model::{LayerKind, LayerSpec};
use crate::planner::{LayerUnroll, UnrollPlan};
use crate::quant::{self, WeightFormat, ACT_FRAC_BITS};

const LAYER_DENSE: &str = include_str!("../templates/layer_dense.sv");
const LAYER_DW: &str = include_str!("../templates/layer_dw.sv");
const LAYER_POOL: &str = include_str!("../templates/layer_pool.sv");
const MAC_SHIFT: &str = include_str!("../templates/mac_shift.sv");
const MAC_FIXED: &str = include_str!("../templates/mac_fixed.sv");
const BN_SHARED: &str = include_str!("../templates/bn_shared.sv");
const REQUANT: &str = include_str!("../templates/requant.sv");
const LOGITS: &str = include_str!("../templates/logits.sv");
const TOP: &str = include_str!("../templates/top.sv");

pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# flatstream rtl manifest v1";

#[derive(Debug, Error)]
pub enum RtlError {
    #[error("output directory {0} is not empty (use force to overwrite)")]
    OutputExists(String),
    #[error("inconsistent inputs: {0}")]
    InconsistentInputs(String),
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fills `{{KEY}}` placeholders; every placeholder must be bound.
fn render(template: &str, vars: &HashMap<&str, String>) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let end = rest[start..].find("}}").expect("unterminated placeholder") + start;
        let key = &rest[start + 2..end];
        out.push_str(vars.get(key).unwrap_or_else(|| panic!("template placeholder {key} is unbound")));
        rest = &rest[end + 2..];
    }
    out.push_str(rest);
    out
}

/// Port widths and parameters of one layer core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestLayer {
    pub index: usize,
    pub module: String,
    pub kind: LayerKind,
    /// `shift<n>` / `fixed<n>`, or `none` for pooling.
    pub quant: String,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub u: usize,
    pub u_out: usize,
    pub act_in_width: usize,
    /// `act` for activation codes, `logits` for raw 32-bit accumulators.
    pub out_kind: String,
    pub out_width: usize,
    pub weight_bus_width: usize,
    pub weight_count: usize,
    pub weights_file: Option<String>,
    pub bn: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub network: String,
    pub top: String,
    pub ipp: String,
    pub layers: Vec<ManifestLayer>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        s += "# weights: one codeword per line, hex, LSB-aligned; bus lane (o*U + i)*K*K + t holds codeword bits LSB first\n";
        let _ = writeln!(s, "network name={} top={} ipp={}", self.network, self.top, self.ipp);
        for l in &self.layers {
            let _ = writeln!(
                s,
                "layer index={} module={} kind={} quant={} kernel={} stride={} padding={} in_channels={} out_channels={} \
                 u={} u_out={} act_in_width={} out_kind={} out_width={} weight_bus_width={} weight_count={} weights={} bn={}",
                l.index,
                l.module,
                l.kind.tag(),
                l.quant,
                l.kernel,
                l.stride,
                l.padding,
                l.in_channels,
                l.out_channels,
                l.u,
                l.u_out,
                l.act_in_width,
                l.out_kind,
                l.out_width,
                l.weight_bus_width,
                l.weight_count,
                l.weights_file.as_deref().unwrap_or("-"),
                l.bn as u8,
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Manifest, RtlError> {
        let mut network = None;
        let mut layers = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let err = |reason: String| RtlError::Manifest { line, reason };
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (tag, rest) = t.split_once(' ').ok_or_else(|| err("missing fields".into()))?;
            let fields: BTreeMap<&str, &str> =
                rest.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
            let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(format!("missing `{k}`")));
            let num = |k: &str| -> Result<usize, RtlError> { get(k)?.parse().map_err(|_| err(format!("`{k}` is not a number"))) };
            match tag {
                "network" => network = Some((get("name")?.to_string(), get("top")?.to_string(), get("ipp")?.to_string())),
                "layer" => layers.push(ManifestLayer {
                    index: num("index")?,
                    module: get("module")?.to_string(),
                    kind: LayerKind::from_tag(get("kind")?).ok_or_else(|| err("unknown kind".into()))?,
                    quant: get("quant")?.to_string(),
                    kernel: num("kernel")?,
                    stride: num("stride")?,
                    padding: num("padding")?,
                    in_channels: num("in_channels")?,
                    out_channels: num("out_channels")?,
                    u: num("u")?,
                    u_out: num("u_out")?,
                    act_in_width: num("act_in_width")?,
                    out_kind: get("out_kind")?.to_string(),
                    out_width: num("out_width")?,
                    weight_bus_width: num("weight_bus_width")?,
                    weight_count: num("weight_count")?,
                    weights_file: Some(get("weights")?).filter(|w| *w != "-").map(str::to_string),
                    bn: num("bn")? != 0,
                }),
                other => return Err(err(format!("unknown record `{other}`"))),
            }
        }
        let (network, top, ipp) = network.ok_or(RtlError::Manifest { line: 0, reason: "missing network record".into() })?;
        Ok(Manifest { network, top, ipp, layers })
    }
}

/// Generated files, in write order, plus the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RtlArtifact {
    pub files: Vec<(String, String)>,
    pub manifest: Manifest,
}

fn sanitize(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    if s.starts_with(|c: char| c.is_ascii_digit()) || s.is_empty() {
        format!("net_{s}")
    } else {
        s
    }
}

/// Weight codewords as `$readmemh` text.
pub fn weight_hex(codes: &[u16], bits: u8) -> String {
    let digits = (bits as usize).div_ceil(4);
    let mut s = String::with_capacity(codes.len() * (digits + 1));
    for c in codes {
        let _ = writeln!(s, "{c:0digits$x}");
    }
    s
}

pub fn parse_weight_hex(text: &str) -> Result<Vec<u16>, RtlError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("//"))
        .enumerate()
        .map(|(i, l)| {
            u16::from_str_radix(l, 16).map_err(|_| RtlError::Manifest { line: i + 1, reason: format!("bad hex word {l:?}") })
        })
        .collect()
}

fn manifest_layer(index: usize, spec: &LayerSpec, layer: &QuantizedLayer, unroll: &LayerUnroll, logits: bool) -> ManifestLayer {
    let k2 = spec.kernel * spec.kernel;
    let bits = layer.weights.as_ref().map_or(0, |w| w.format.bits() as usize);
    let weight_bus_width = match spec.kind {
        LayerKind::AvgPool => 0,
        LayerKind::DepthwiseConv => unroll.u * k2 * bits,
        _ => unroll.u * spec.out_channels * k2 * bits,
    };
    ManifestLayer {
        index,
        module: format!("layer_{index}_{}", spec.kind.tag()),
        kind: spec.kind,
        quant: layer.weights.as_ref().map_or("none".into(), |w| format!("{}{}", w.format.arith().tag(), bits)),
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        in_channels: spec.in_channels,
        out_channels: spec.out_channels,
        u: unroll.u,
        u_out: unroll.u_out,
        act_in_width: unroll.u * 8,
        out_kind: if logits { "logits" } else { "act" }.into(),
        out_width: unroll.u_out * if logits { 32 } else { 8 },
        weight_bus_width,
        weight_count: layer.weights.as_ref().map_or(0, |w| w.len()),
        weights_file: layer.weights.as_ref().map(|_| format!("weights_{index}.hex")),
        bn: layer.bn.is_some(),
    }
}

fn layer_source(m: &ManifestLayer, spec: &LayerSpec, layer: &QuantizedLayer, unroll: &LayerUnroll) -> String {
    let mut v: HashMap<&str, String> = HashMap::new();
    v.insert("MODULE", m.module.clone());
    v.insert("KIND", spec.kind.tag().to_string());
    v.insert("H", spec.in_height.to_string());
    v.insert("W", spec.in_width.to_string());
    v.insert("K", spec.kernel.to_string());
    v.insert("S", spec.stride.to_string());
    v.insert("P", spec.padding.to_string());
    v.insert("C", spec.in_channels.to_string());
    v.insert("C_OUT", spec.out_channels.to_string());
    v.insert("U", unroll.u.to_string());
    v.insert("U_OUT", unroll.u_out.to_string());
    v.insert("IN_PHASES", unroll.input_phases(spec).to_string());
    v.insert("OUT_PHASES", unroll.output_phases(spec).to_string());
    v.insert("ACT_IN_WIDTH", m.act_in_width.to_string());
    v.insert("OUT_WIDTH", m.out_width.to_string());

    let Some(weights) = &layer.weights else {
        v.insert("AREA", (spec.kernel * spec.kernel).to_string());
        return render(LAYER_POOL, &v);
    };
    let iw = quant::integer_weights(&weights.format, &weights.codes);
    let (arith, scale_name, scale, exp_floor) = match weights.format {
        WeightFormat::Shift(p) => {
            let floor = weights.codes.iter().filter_map(|&c| p.split(c)).map(|(_, e)| e).min().unwrap_or(0);
            ("shift", "bias", p.bias, floor)
        }
        WeightFormat::Fixed(f) => ("fixed", "point", f.point, 0),
    };
    v.insert("ARITH", arith.into());
    v.insert("BITS", weights.format.bits().to_string());
    v.insert("SCALE_NAME", scale_name.into());
    v.insert("SCALE", scale.to_string());
    v.insert("ACC_FRAC", (ACT_FRAC_BITS + iw.frac_bits).to_string());
    v.insert("WEIGHT_COUNT", m.weight_count.to_string());
    v.insert("WEIGHT_FILE", m.weights_file.clone().unwrap_or_default());
    v.insert("WEIGHT_BUS_WIDTH", m.weight_bus_width.to_string());
    v.insert("EXP_FLOOR", exp_floor.to_string());
    let dw = spec.kind == LayerKind::DepthwiseConv;
    v.insert("OUT_LANES", if dw { "U" } else { "C_OUT" }.into());
    v.insert("ACC_INIT", if dw { "32'sd0" } else { "(in_phase == 0) ? 32'sd0 : acc[o]" }.into());
    v.insert("I_BEGIN", if dw { "o" } else { "0" }.into());
    v.insert("I_END", if dw { "o + 1" } else { "U" }.into());
    v.insert("LANE_INDEX", if dw { "i" } else { "(o*U + i)" }.into());
    v.insert("ACC_INDEX", if dw { "in_phase*U + o" } else { "o" }.into());
    let mac = match weights.format {
        WeightFormat::Shift(_) => MAC_SHIFT,
        WeightFormat::Fixed(_) => MAC_FIXED,
    };
    v.insert("MAC_ARRAY", render(mac, &v));
    let tail = match (&layer.bn, m.out_kind.as_str()) {
        (_, "logits") => render(LOGITS, &v),
        (Some(bn), _) => {
            let join = |f: &dyn Fn(&quant::FusedAffine) -> i16| bn.iter().map(|a| f(a).to_string()).collect::<Vec<_>>().join(", ");
            v.insert("BN_SCALE", join(&|a| a.scale));
            v.insert("BN_OFFSET", join(&|a| a.offset));
            render(BN_SHARED, &v)
        }
        (None, _) => render(REQUANT, &v),
    };
    v.insert("BN_UNIT", tail);
    render(if dw { LAYER_DW } else { LAYER_DENSE }, &v)
}

fn top_source(manifest: &Manifest) -> String {
    let mut wires = String::new();
    let widths: Vec<usize> = std::iter::once(manifest.layers[0].act_in_width)
        .chain(manifest.layers.iter().map(|l| l.out_width))
        .collect();
    for (i, w) in widths.iter().enumerate() {
        let _ = writeln!(wires, "    logic stage_valid_{i};");
        let _ = writeln!(wires, "    logic [{w}-1:0] stage_data_{i};");
    }
    let mut inst = String::new();
    for l in &manifest.layers {
        let i = l.index;
        let _ = writeln!(
            inst,
            "    {m} u_{m} (\n        .clk(clk), .rst_n(rst_n),\n        .in_valid(stage_valid_{i}), .in_data(stage_data_{i}),\n        .out_valid(stage_valid_{n}), .out_data(stage_data_{n})\n    );\n",
            m = l.module,
            n = i + 1
        );
    }
    let mut v: HashMap<&str, String> = HashMap::new();
    v.insert("NAME", manifest.network.clone());
    v.insert("TOP", manifest.top.clone());
    v.insert("IPP", manifest.ipp.clone());
    v.insert("LAYER_COUNT", manifest.layers.len().to_string());
    v.insert("IN_WIDTH", widths[0].to_string());
    v.insert("OUT_WIDTH", widths[widths.len() - 1].to_string());
    v.insert("WIRES", wires);
    v.insert("INSTANCES", inst);
    render(TOP, &v)
}

/// Renders the whole tree in memory.
pub fn generate(model: &QuantizedModel, plan: &UnrollPlan) -> Result<RtlArtifact, RtlError> {
    let net = &model.net;
    model.check().map_err(|e| RtlError::InconsistentInputs(e.to_string()))?;
    plan.check(net).map_err(|e| RtlError::InconsistentInputs(e.to_string()))?;
    if net.layers.is_empty() {
        return Err(RtlError::InconsistentInputs("network has no layers".into()));
    }
    let layers: Vec<ManifestLayer> = net
        .layers
        .iter()
        .zip(&model.layers)
        .zip(&plan.layers)
        .enumerate()
        .map(|(i, ((spec, layer), u))| manifest_layer(i, spec, layer, u, net.is_logit_layer(i)))
        .collect();
    let manifest = Manifest { network: net.name.clone(), top: format!("{}_top", sanitize(&net.name)), ipp: plan.ipp.to_string(), layers };

    let per_layer: Vec<Vec<(String, String)>> = manifest
        .layers
        .par_iter()
        .zip(net.layers.par_iter().zip(model.layers.par_iter().zip(plan.layers.par_iter())))
        .map(|(m, (spec, (layer, u)))| {
            let mut files = vec![(format!("{}.sv", m.module), layer_source(m, spec, layer, u))];
            if let (Some(file), Some(w)) = (&m.weights_file, &layer.weights) {
                files.push((file.clone(), weight_hex(&w.codes, w.format.bits())));
            }
            files
        })
        .collect();
    let mut files = vec![("top.sv".to_string(), top_source(&manifest))];
    files.extend(per_layer.into_iter().flatten());
    Ok(RtlArtifact { files, manifest })
}

/// Writes the tree to `out_dir`; the manifest goes last.
pub fn emit(model: &QuantizedModel, plan: &UnrollPlan, out_dir: &Path, force: bool) -> Result<RtlArtifact, RtlError> {
    let artifact = generate(model, plan)?;
    if out_dir.exists() && std::fs::read_dir(out_dir)?.next().is_some() && !force {
        return Err(RtlError::OutputExists(out_dir.display().to_string()));
    }
    std::fs::create_dir_all(out_dir)?;
    artifact.files.par_iter().try_for_each(|(name, text)| std::fs::write(out_dir.join(name), text))?;
    std::fs::write(out_dir.join(MANIFEST_NAME), artifact.manifest.to_text())?;
    Ok(artifact)
}
