//! Analytical resource and latency estimator.
//!
//! Coefficients are a synthetic but plausible table; only relative and
//! monotone behaviour is meaningful. The table can be overridden from TOML.

use std::collections::HashMap;
use std::iter::Sum;
use std::ops::Add;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LayerKind, LayerSpec, NetworkSpec};
use crate::planner::{LayerUnroll, UnrollPlan};
use crate::quant::{Arithmetic, LayerQuant, QuantConfig};

/// Activation width in bits.
const ACT_BITS: u64 = 8;
/// Width of the fused batch-norm scale and offset.
const AFFINE_BITS: u64 = 16;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("malformed coefficient table: {0}")]
    Malformed(String),
    #[error("coefficient {0} must be non-negative")]
    Negative(&'static str),
    #[error("shift-add lanes must not cost more LUTs than multiply-accumulate lanes")]
    ShiftCostlier,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CostReport {
    pub luts: u64,
    pub registers: u64,
    pub bram_bits: u64,
    pub dsps: u64,
    pub latency_cycles: u64,
}

impl CostReport {
    /// A budget with no limit on any resource.
    pub const UNLIMITED: CostReport =
        CostReport { luts: u64::MAX, registers: u64::MAX, bram_bits: u64::MAX, dsps: u64::MAX, latency_cycles: u64::MAX };

    /// Whether every area resource fits under `budget` (latency is ignored).
    pub fn fits(&self, budget: &CostReport) -> bool {
        self.luts <= budget.luts
            && self.registers <= budget.registers
            && self.bram_bits <= budget.bram_bits
            && self.dsps <= budget.dsps
    }

    pub fn key(&self, w: &KeyWeights) -> f64 {
        w.lut * self.luts as f64 + w.bram_bit * self.bram_bits as f64 + w.dsp * self.dsps as f64
    }
}

impl Add for CostReport {
    type Output = CostReport;

    fn add(self, o: CostReport) -> CostReport {
        CostReport {
            luts: self.luts.saturating_add(o.luts),
            registers: self.registers.saturating_add(o.registers),
            bram_bits: self.bram_bits.saturating_add(o.bram_bits),
            dsps: self.dsps.saturating_add(o.dsps),
            latency_cycles: self.latency_cycles.saturating_add(o.latency_cycles),
        }
    }
}

impl Sum for CostReport {
    fn sum<I: Iterator<Item = CostReport>>(iter: I) -> Self {
        iter.fold(CostReport::default(), Add::add)
    }
}

/// `act · w_act + bits · n + constant` LUTs per lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearLuts {
    pub act: f64,
    pub bits: f64,
    pub constant: f64,
}

impl LinearLuts {
    pub fn eval(&self, act_bits: u64, weight_bits: u64) -> f64 {
        self.act * act_bits as f64 + self.bits * weight_bits as f64 + self.constant
    }
}

/// Weights of the scalar ordering key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyWeights {
    pub lut: f64,
    pub bram_bit: f64,
    pub dsp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostCoefficients {
    pub lut_per_shiftadd: LinearLuts,
    pub lut_per_mac: LinearLuts,
    /// LUTs per pooling lane (adder plus divider share).
    pub lut_per_pool_lane: f64,
    pub regs_per_unit: f64,
    /// Registers per buffered activation bit in line buffers and windows.
    pub window_regs_per_bit: f64,
    pub bram_bits_per_weight_bit: f64,
    pub dsp_per_bn_multiplier: f64,
    pub key: KeyWeights,
}

impl Default for CostCoefficients {
    fn default() -> Self {
        Self {
            lut_per_shiftadd: LinearLuts { act: 1.0, bits: 1.0, constant: 2.0 },
            lut_per_mac: LinearLuts { act: 2.0, bits: 6.0, constant: 4.0 },
            lut_per_pool_lane: 24.0,
            regs_per_unit: 8.0,
            window_regs_per_bit: 1.0,
            bram_bits_per_weight_bit: 1.0,
            dsp_per_bn_multiplier: 1.0,
            key: KeyWeights { lut: 1.0, bram_bit: 0.01, dsp: 50.0 },
        }
    }
}

impl CostCoefficients {
    pub fn from_toml(text: &str) -> Result<Self, CostError> {
        let c: CostCoefficients = toml::from_str(text).map_err(|e| CostError::Malformed(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("coefficients serialize")
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let named = [
            ("lut_per_shiftadd.act", self.lut_per_shiftadd.act),
            ("lut_per_shiftadd.bits", self.lut_per_shiftadd.bits),
            ("lut_per_shiftadd.constant", self.lut_per_shiftadd.constant),
            ("lut_per_mac.act", self.lut_per_mac.act),
            ("lut_per_mac.bits", self.lut_per_mac.bits),
            ("lut_per_mac.constant", self.lut_per_mac.constant),
            ("lut_per_pool_lane", self.lut_per_pool_lane),
            ("regs_per_unit", self.regs_per_unit),
            ("window_regs_per_bit", self.window_regs_per_bit),
            ("bram_bits_per_weight_bit", self.bram_bits_per_weight_bit),
            ("dsp_per_bn_multiplier", self.dsp_per_bn_multiplier),
            ("key.lut", self.key.lut),
            ("key.bram_bit", self.key.bram_bit),
            ("key.dsp", self.key.dsp),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(CostError::Negative(name));
        }
        // Both maps are linear in n, so checking the ends of the range suffices.
        for n in [crate::quant::MIN_BITS, crate::quant::MAX_BITS] {
            if self.lut_per_shiftadd.eval(ACT_BITS, n as u64) > self.lut_per_mac.eval(ACT_BITS, n as u64) {
                return Err(CostError::ShiftCostlier);
            }
        }
        Ok(())
    }

    fn lut_per_lane(&self, q: LayerQuant) -> f64 {
        let lin = match q.arith {
            Arithmetic::Shift => &self.lut_per_shiftadd,
            Arithmetic::Fixed => &self.lut_per_mac,
        };
        lin.eval(ACT_BITS, q.bits as u64)
    }
}

/// Shift-accumulate or multiply-accumulate lanes instantiated for a layer.
/// Pooling has adders only and counts no compute units.
pub fn compute_units(spec: &LayerSpec, unroll: &LayerUnroll) -> u64 {
    let k2 = (spec.kernel * spec.kernel) as u64;
    match spec.kind {
        LayerKind::AvgPool => 0,
        LayerKind::DepthwiseConv => unroll.u as u64 * k2,
        _ => unroll.u as u64 * spec.out_channels as u64 * k2,
    }
}

/// Cycles from a layer's first input pixel to its first output value: the
/// line-buffer fill, one pass over the input channels, one over the outputs.
pub fn layer_latency(spec: &LayerSpec, unroll: &LayerUnroll) -> u64 {
    let reach = (spec.kernel - 1).saturating_sub(spec.padding) as u64;
    unroll.t_in * (reach * spec.in_width as u64 + reach)
        + unroll.input_phases(spec) as u64
        + unroll.output_phases(spec) as u64
}

pub fn estimate_layer(
    spec: &LayerSpec,
    quant: Option<LayerQuant>,
    unroll: &LayerUnroll,
    coeff: &CostCoefficients,
) -> CostReport {
    let units = compute_units(spec, unroll);
    let luts = match (spec.kind, quant) {
        (LayerKind::AvgPool, _) | (_, None) => coeff.lut_per_pool_lane * unroll.u as f64,
        (_, Some(q)) => coeff.lut_per_lane(q) * units as f64,
    };
    let window_bits = if spec.kernel > 1 {
        ((spec.kernel as u64 - 1) * spec.in_width as u64 + spec.kernel as u64) * spec.in_channels as u64 * ACT_BITS
    } else {
        0
    };
    let registers = coeff.regs_per_unit * units as f64 + coeff.window_regs_per_bit * window_bits as f64;
    let weight_bits = quant.map_or(0, |q| spec.weight_count() as u64 * q.bits as u64);
    let bn_bits = if spec.has_bn { 2 * spec.out_channels as u64 * AFFINE_BITS } else { 0 };
    let dsps = if spec.has_bn { coeff.dsp_per_bn_multiplier * unroll.u_out as f64 } else { 0.0 };
    CostReport {
        luts: luts.ceil() as u64,
        registers: registers.ceil() as u64,
        bram_bits: (coeff.bram_bits_per_weight_bit * weight_bits as f64).ceil() as u64 + bn_bits,
        dsps: dsps.ceil() as u64,
        latency_cycles: layer_latency(spec, unroll),
    }
}

/// Per-layer reports for a whole network.
pub fn layer_costs(net: &NetworkSpec, q: &QuantConfig, plan: &UnrollPlan, coeff: &CostCoefficients) -> Vec<CostReport> {
    net.layers
        .iter()
        .zip(&plan.layers)
        .enumerate()
        .map(|(i, (spec, u))| estimate_layer(spec, q.get(i), u, coeff))
        .collect()
}

pub fn hwcost(net: &NetworkSpec, q: &QuantConfig, plan: &UnrollPlan, coeff: &CostCoefficients) -> CostReport {
    layer_costs(net, q, plan, coeff).into_iter().sum()
}

type CacheKey = (LayerSpec, Option<LayerQuant>, LayerUnroll);

/// Memoizing estimator, safe to share between threads.
#[derive(Debug)]
pub struct CostModel {
    pub coeff: CostCoefficients,
    cache: RwLock<HashMap<CacheKey, CostReport>>,
}

impl CostModel {
    pub fn new(coeff: CostCoefficients) -> Self {
        Self { coeff, cache: RwLock::new(HashMap::new()) }
    }

    pub fn layer(&self, spec: &LayerSpec, quant: Option<LayerQuant>, unroll: &LayerUnroll) -> CostReport {
        let key = (spec.clone(), quant, *unroll);
        if let Some(r) = self.cache.read().expect("cost cache poisoned").get(&key) {
            return *r;
        }
        let r = estimate_layer(spec, quant, unroll, &self.coeff);
        self.cache.write().expect("cost cache poisoned").insert(key, r);
        r
    }

    pub fn total(&self, net: &NetworkSpec, q: &QuantConfig, plan: &UnrollPlan) -> CostReport {
        net.layers.iter().zip(&plan.layers).enumerate().map(|(i, (s, u))| self.layer(s, q.get(i), u)).sum()
    }

    pub fn key(&self, net: &NetworkSpec, q: &QuantConfig, plan: &UnrollPlan) -> f64 {
        self.total(net, q, plan).key(&self.coeff.key)
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self::new(CostCoefficients::default())
    }
}
