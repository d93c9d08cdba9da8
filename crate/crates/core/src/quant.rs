//! Weight quantizers (power-of-two "shift" and fixed-point), the unsigned
//! 3.5 activation format and batch-norm fusion into 8.8 fixed-point affines.
//!
//! Shift codewords are `n` bits: the top bit is the sign and the low `n - 1`
//! bits hold the exponent `e`. The all-ones exponent field is reserved for
//! zero, so `e` ranges over `[0, 2^(n-1) - 2]` and decodes to `±2^(e - b)`.
//! Fixed-point codewords are `n`-bit two's complement mantissas decoding to
//! `m · 2^-p`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BnParams, NetworkSpec};

/// Fractional bits of the activation format.
pub const ACT_FRAC_BITS: i32 = 5;
/// Largest activation code (7.96875).
pub const ACT_MAX_CODE: u8 = 255;
/// Binary point of the fused batch-norm scale and offset.
pub const AFFINE_FRAC_BITS: i32 = 8;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("all weights are zero; the layer bias is undefined")]
    AllZeroWeights,
    #[error("non-positive sigma {sigma} in channel {channel}")]
    NonPositiveSigma { channel: usize, sigma: f64 },
    #[error("bit width {0} outside [2, 16]")]
    BadWidth(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arithmetic {
    Shift,
    Fixed,
}

impl Arithmetic {
    pub fn toggled(self) -> Self {
        match self {
            Arithmetic::Shift => Arithmetic::Fixed,
            Arithmetic::Fixed => Arithmetic::Shift,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Arithmetic::Shift => "shift",
            Arithmetic::Fixed => "fixed",
        }
    }
}

impl fmt::Display for Arithmetic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Per-layer quantization choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerQuant {
    pub arith: Arithmetic,
    pub bits: u8,
}

impl LayerQuant {
    pub fn new(arith: Arithmetic, bits: u8) -> Self {
        Self { arith, bits }
    }
}

impl fmt::Display for LayerQuant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.arith, self.bits)
    }
}

/// Per-layer arithmetic and width; `None` for layers without weights.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantConfig {
    pub layers: Vec<Option<LayerQuant>>,
}

impl QuantConfig {
    /// Every weighted layer in 8-bit fixed point.
    pub fn initial(net: &NetworkSpec) -> Self {
        Self::uniform(net, LayerQuant::new(Arithmetic::Fixed, 8))
    }

    pub fn uniform(net: &NetworkSpec, q: LayerQuant) -> Self {
        Self { layers: net.layers.iter().map(|l| l.has_weights().then_some(q)).collect() }
    }

    pub fn get(&self, layer: usize) -> Option<LayerQuant> {
        self.layers.get(layer).copied().flatten()
    }

    pub fn check(&self, net: &NetworkSpec) -> bool {
        self.layers.len() == net.layers.len()
            && net.layers.iter().zip(&self.layers).all(|(l, q)| match q {
                Some(q) => l.has_weights() && (MIN_BITS..=MAX_BITS).contains(&q.bits),
                None => !l.has_weights(),
            })
    }
}

impl fmt::Display for QuantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> =
            self.layers.iter().map(|q| q.map_or_else(|| "-".to_string(), |q| q.to_string())).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Exact 2^k for the exponent range used here.
pub fn pow2(k: i32) -> f64 {
    2f64.powi(k)
}

/// Round half away from zero of `v / 2^shift` for `shift >= 0`.
pub fn round_shift(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let half = 1i128 << (shift - 1);
    if v >= 0 {
        (v + half) >> shift
    } else {
        -((-v + half) >> shift)
    }
}

/// Round half away from zero of `num / den` for `den > 0`.
pub fn round_div(num: i64, den: i64) -> i64 {
    debug_assert!(den > 0);
    let q = (2 * num.abs() + den) / (2 * den);
    if num < 0 {
        -q
    } else {
        q
    }
}

// ---------------------------------------------------------------------------
// Shift quantization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShiftLayerParams {
    pub bits: u8,
    pub bias: i32,
}

impl ShiftLayerParams {
    pub fn new(bits: u8, bias: i32) -> Self {
        Self { bits, bias }
    }

    pub fn max_exponent(&self) -> i32 {
        shift_max_exponent(self.bits)
    }

    pub fn zero_field(&self) -> u16 {
        (1u16 << (self.bits - 1)) - 1
    }

    pub fn zero_code(&self) -> u16 {
        self.zero_field()
    }

    pub fn encode(&self, negative: bool, exponent: i32) -> u16 {
        debug_assert!((0..=self.max_exponent()).contains(&exponent));
        ((negative as u16) << (self.bits - 1)) | exponent as u16
    }

    /// Sign and exponent of a codeword, or `None` for the zero code.
    pub fn split(&self, code: u16) -> Option<(bool, i32)> {
        let field = code & self.zero_field();
        if field == self.zero_field() {
            None
        } else {
            Some((code >> (self.bits - 1) & 1 == 1, field as i32))
        }
    }

    pub fn decode(&self, code: u16) -> f64 {
        match self.split(code) {
            None => 0.0,
            Some((neg, e)) => {
                let mag = pow2(e - self.bias);
                if neg {
                    -mag
                } else {
                    mag
                }
            }
        }
    }

    pub fn largest_magnitude(&self) -> f64 {
        pow2(self.max_exponent() - self.bias)
    }

    pub fn smallest_magnitude(&self) -> f64 {
        pow2(-self.bias)
    }

    /// All distinct codewords (one canonical zero).
    pub fn codewords(&self) -> impl Iterator<Item = u16> + '_ {
        let e_max = self.max_exponent();
        std::iter::once(self.zero_code())
            .chain((0..=e_max).flat_map(move |e| [self.encode(false, e), self.encode(true, e)]))
    }
}

/// e_max = 2^(n-1) - 2.
pub fn shift_max_exponent(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 2
}

/// Smallest integer k with 2^k >= a, for a > 0.
fn ceil_log2(a: f64) -> i32 {
    let mut k = a.log2().ceil() as i32;
    while pow2(k) < a {
        k += 1;
    }
    while pow2(k - 1) >= a {
        k -= 1;
    }
    k
}

/// Largest integer k with 2^k <= a, for a > 0.
fn floor_log2(a: f64) -> i32 {
    let mut k = a.log2().floor() as i32;
    while pow2(k) > a {
        k -= 1;
    }
    while pow2(k + 1) <= a {
        k += 1;
    }
    k
}

/// Largest bias b with 2^(e_max - b) >= max|w|.
pub fn choose_shift_bias(weights: &[f64], bits: u8) -> Result<i32, QuantError> {
    check_bits(bits)?;
    let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max_abs == 0.0 {
        return Err(QuantError::AllZeroWeights);
    }
    Ok(shift_max_exponent(bits) - ceil_log2(max_abs))
}

/// Nearest shift codeword in linear distance; ties go to the smaller magnitude.
pub fn quantize_shift(w: f64, params: ShiftLayerParams) -> u16 {
    let a = w.abs();
    let neg = w < 0.0;
    let e_max = params.max_exponent();
    let lo_k = -params.bias;
    let hi_k = e_max - params.bias;
    if a == 0.0 || a.is_nan() {
        return params.zero_code();
    }
    if a >= pow2(hi_k) {
        return params.encode(neg, e_max);
    }
    let min_mag = pow2(lo_k);
    if a < min_mag {
        return if a <= min_mag / 2.0 { params.zero_code() } else { params.encode(neg, 0) };
    }
    let k = floor_log2(a).clamp(lo_k, hi_k - 1);
    let lower = pow2(k);
    let upper = pow2(k + 1);
    let k = if a - lower <= upper - a { k } else { k + 1 };
    params.encode(neg, k + params.bias)
}

// ---------------------------------------------------------------------------
// Fixed-point quantization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedFormat {
    pub bits: u8,
    pub point: i32,
}

impl FixedFormat {
    pub fn new(bits: u8, point: i32) -> Self {
        Self { bits, point }
    }

    pub fn min_mantissa(&self) -> i32 {
        -(1i32 << (self.bits - 1))
    }

    pub fn max_mantissa(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }

    pub fn decode_mantissa(&self, m: i32) -> f64 {
        m as f64 * pow2(-self.point)
    }

    /// n-bit two's complement pattern of a mantissa.
    pub fn to_code(&self, m: i32) -> u16 {
        (m as u32 & ((1u32 << self.bits) - 1)) as u16
    }

    pub fn mantissa(&self, code: u16) -> i32 {
        let shift = 32 - self.bits as u32;
        ((code as i32) << shift) >> shift
    }

    pub fn decode(&self, code: u16) -> f64 {
        self.decode_mantissa(self.mantissa(code))
    }

    pub fn codewords(&self) -> impl Iterator<Item = u16> + '_ {
        (self.min_mantissa()..=self.max_mantissa()).map(|m| self.to_code(m))
    }
}

/// Largest point p with max|w| <= (2^(n-1) - 1) · 2^-p.
pub fn choose_fixed_point(weights: &[f64], bits: u8) -> Result<i32, QuantError> {
    check_bits(bits)?;
    let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max_abs == 0.0 {
        return Err(QuantError::AllZeroWeights);
    }
    let top = ((1i64 << (bits - 1)) - 1) as f64;
    Ok(floor_log2(top / max_abs).max(-126)).map(|mut p| {
        // guard against rounding in the division
        while top * pow2(-p) < max_abs {
            p -= 1;
        }
        while top * pow2(-(p + 1)) >= max_abs {
            p += 1;
        }
        p
    })
}

/// m = clamp(round_half_away(w · 2^p), -2^(n-1), 2^(n-1) - 1).
pub fn quantize_fixed(w: f64, fmt: FixedFormat) -> i32 {
    let scaled = (w * pow2(fmt.point)).round();
    if scaled.is_nan() {
        return 0;
    }
    scaled.clamp(fmt.min_mantissa() as f64, fmt.max_mantissa() as f64) as i32
}

fn check_bits(bits: u8) -> Result<(), QuantError> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::BadWidth(bits))
    }
}

// ---------------------------------------------------------------------------
// Layer weight formats

/// Quantization format of one layer's weights, with the derived bias/point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightFormat {
    Shift(ShiftLayerParams),
    Fixed(FixedFormat),
}

impl WeightFormat {
    pub fn bits(&self) -> u8 {
        match self {
            WeightFormat::Shift(p) => p.bits,
            WeightFormat::Fixed(f) => f.bits,
        }
    }

    pub fn arith(&self) -> Arithmetic {
        match self {
            WeightFormat::Shift(_) => Arithmetic::Shift,
            WeightFormat::Fixed(_) => Arithmetic::Fixed,
        }
    }

    pub fn decode(&self, code: u16) -> f64 {
        match self {
            WeightFormat::Shift(p) => p.decode(code),
            WeightFormat::Fixed(f) => f.decode(code),
        }
    }

    pub fn quantize(&self, w: f64) -> u16 {
        match self {
            WeightFormat::Shift(p) => quantize_shift(w, *p),
            WeightFormat::Fixed(f) => f.to_code(quantize_fixed(w, *f)),
        }
    }

    /// Whether `code` is a canonical codeword of this format.
    pub fn is_valid(&self, code: u16) -> bool {
        let bits = self.bits();
        if u32::from(code) >> bits != 0 {
            return false;
        }
        match self {
            // the zero code is canonical only with a clear sign bit
            WeightFormat::Shift(p) => p.split(code).is_some() || code == p.zero_code(),
            WeightFormat::Fixed(_) => true,
        }
    }

    /// Picks bias/point for the given weights. All-zero layers use 0.
    pub fn fit(q: LayerQuant, weights: &[f64]) -> Result<Self, QuantError> {
        Ok(match q.arith {
            Arithmetic::Shift => {
                let b = match choose_shift_bias(weights, q.bits) {
                    Ok(b) => b,
                    Err(QuantError::AllZeroWeights) => 0,
                    Err(e) => return Err(e),
                };
                WeightFormat::Shift(ShiftLayerParams::new(q.bits, b))
            }
            Arithmetic::Fixed => {
                let p = match choose_fixed_point(weights, q.bits) {
                    Ok(p) => p,
                    Err(QuantError::AllZeroWeights) => 0,
                    Err(e) => return Err(e),
                };
                WeightFormat::Fixed(FixedFormat::new(q.bits, p))
            }
        })
    }
}

/// Integer weights at a common binary point, as consumed by the datapath.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegerWeights {
    /// `value = multiplier · 2^-frac_bits`.
    pub multipliers: Vec<i32>,
    pub frac_bits: i32,
    /// For shift layers: `(negative, left shift)` per weight, `None` for zero.
    pub shifts: Option<Vec<Option<(bool, u32)>>>,
}

impl IntegerWeights {
    pub fn max_abs(&self) -> i64 {
        self.multipliers.iter().map(|m| (*m as i64).abs()).max().unwrap_or(0)
    }
}

/// Lowers codewords to integer multipliers. Shift layers are rebased on the
/// smallest exponent in use so the accumulator keeps only the bits it needs.
pub fn integer_weights(format: &WeightFormat, codes: &[u16]) -> IntegerWeights {
    match format {
        WeightFormat::Fixed(f) => IntegerWeights {
            multipliers: codes.iter().map(|&c| f.mantissa(c)).collect(),
            frac_bits: f.point,
            shifts: None,
        },
        WeightFormat::Shift(p) => {
            let floor = codes.iter().filter_map(|&c| p.split(c)).map(|(_, e)| e).min().unwrap_or(0);
            let shifts: Vec<Option<(bool, u32)>> =
                codes.iter().map(|&c| p.split(c).map(|(neg, e)| (neg, (e - floor) as u32))).collect();
            let multipliers = shifts
                .iter()
                .map(|s| match s {
                    None => 0,
                    Some((neg, sh)) => {
                        // saturates; the overflow certificate rejects such layers
                        let v = if *sh >= 32 { 1i64 << 32 } else { 1i64 << sh };
                        let v = if *neg { -v } else { v };
                        v.clamp(i32::MIN as i64, i32::MAX as i64) as i32
                    }
                })
                .collect();
            IntegerWeights { multipliers, frac_bits: p.bias - floor, shifts: Some(shifts) }
        }
    }
}

// ---------------------------------------------------------------------------
// Activations and batch norm

/// Unsigned 8-bit activation with 5 fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct ActCode(pub u8);

impl ActCode {
    pub fn value(self) -> f64 {
        self.0 as f64 * pow2(-ACT_FRAC_BITS)
    }

    /// Nearest code to a real value, clamped to [0, 7.96875].
    pub fn from_real(v: f64) -> Self {
        let c = (v * pow2(ACT_FRAC_BITS)).round();
        ActCode(c.clamp(0.0, ACT_MAX_CODE as f64) as u8)
    }
}

/// Requantizes a value with `frac_bits` fractional bits to the activation
/// format: round half away from zero, then clamp to [0, 255]. The clamp at
/// zero is the ReLU.
pub fn quantize_activation(value: i128, frac_bits: i32) -> u8 {
    let shift = frac_bits - ACT_FRAC_BITS;
    let v = if shift >= 0 { round_shift(value, shift as u32) } else { value << (-shift) as u32 };
    v.clamp(0, ACT_MAX_CODE as i128) as u8
}

/// Batch norm folded into `scale · x + offset`, both signed 16-bit with 8
/// fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FusedAffine {
    pub scale: i16,
    pub offset: i16,
}

impl FusedAffine {
    pub const IDENTITY: FusedAffine = FusedAffine { scale: 1 << AFFINE_FRAC_BITS, offset: 0 };

    pub fn scale_value(&self) -> f64 {
        self.scale as f64 * pow2(-AFFINE_FRAC_BITS)
    }

    pub fn offset_value(&self) -> f64 {
        self.offset as f64 * pow2(-AFFINE_FRAC_BITS)
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.scale_value() * x + self.offset_value()
    }
}

/// Rounds to 16-bit fixed point with the binary point at 8, saturating.
pub fn quantize_8_8(v: f64) -> i16 {
    (v * pow2(AFFINE_FRAC_BITS)).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn fuse_bn(bn: &BnParams) -> Result<Vec<FusedAffine>, QuantError> {
    (0..bn.channels())
        .map(|c| {
            let sigma = bn.sigma[c];
            if sigma.is_nan() || sigma <= 0.0 {
                return Err(QuantError::NonPositiveSigma { channel: c, sigma });
            }
            let scale = bn.gamma[c] / sigma;
            let offset = bn.beta[c] - bn.gamma[c] * bn.mean[c] / sigma;
            Ok(FusedAffine { scale: quantize_8_8(scale), offset: quantize_8_8(offset) })
        })
        .collect()
}

/// Accumulator (with `acc_frac` fractional bits) through the optional fused
/// affine and into the activation format.
pub fn requantize(acc: i64, acc_frac: i32, affine: Option<FusedAffine>) -> u8 {
    let (mut v, mut point) = (acc as i128, acc_frac);
    if point < 0 {
        v <<= (-point) as u32;
        point = 0;
    }
    match affine {
        Some(a) => {
            let y = v * a.scale as i128 + ((a.offset as i128) << point as u32);
            quantize_activation(y, point + AFFINE_FRAC_BITS)
        }
        None => quantize_activation(v, point),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Largest b in [-128, 128] satisfying the no-overflow bound.
    fn scan_bias(max_abs: f64, bits: u8) -> i32 {
        let e_max = shift_max_exponent(bits);
        (-128..=128).rev().find(|&b| pow2(e_max - b) >= max_abs).unwrap()
    }

    fn scan_point(max_abs: f64, bits: u8) -> i32 {
        let top = ((1 << (bits - 1)) - 1) as f64;
        (-64..=64).rev().find(|&p| top * pow2(-p) >= max_abs).unwrap()
    }

    fn nearest_shift(w: f64, p: ShiftLayerParams) -> f64 {
        let mut best = 0.0f64;
        for c in p.codewords() {
            let v = p.decode(c);
            let (d, db) = ((v - w).abs(), (best - w).abs());
            if d < db || (d == db && v.abs() < best.abs()) {
                best = v;
            }
        }
        best
    }

    #[test]
    fn shift_bias_examples() {
        assert_eq!(scan_bias(1.0, 3), 2);
        assert_eq!(choose_shift_bias(&[1.0, -0.2], 3), Ok(2));
        assert_eq!(scan_bias(0.3, 4), 7);
        assert_eq!(choose_shift_bias(&[0.3], 4), Ok(7));
        for bits in 2..=8 {
            let m = pow2(shift_max_exponent(bits));
            assert_eq!(choose_shift_bias(&[m], bits), Ok(0));
        }
        assert_eq!(choose_shift_bias(&[0.0, 0.0], 4), Err(QuantError::AllZeroWeights));
    }

    #[test]
    fn shift_bias_matches_scan() {
        for i in 1..400 {
            let m = i as f64 * 0.0137;
            for bits in 2..=6 {
                assert_eq!(choose_shift_bias(&[m], bits).unwrap(), scan_bias(m, bits), "m={m} n={bits}");
            }
        }
    }

    #[test]
    fn shift_quantization_examples() {
        let p = ShiftLayerParams::new(3, 2);
        assert_eq!(p.decode(quantize_shift(0.0, p)), 0.0);
        // 0.7 is 0.2 from 0.5 and 0.3 from 1.0
        assert_eq!(nearest_shift(0.7, p), 0.5);
        assert_eq!(p.decode(quantize_shift(0.7, p)), 0.5);
        assert_eq!(p.split(quantize_shift(0.7, p)), Some((false, 1)));
        assert_eq!(p.decode(quantize_shift(0.8, p)), 1.0);
        // exactly half the smallest magnitude ties to zero
        assert_eq!(quantize_shift(-0.125, p), p.zero_code());
        assert_eq!(p.decode(quantize_shift(-0.13, p)), -0.25);
        // saturation
        assert_eq!(p.decode(quantize_shift(-9.0, p)), -1.0);
    }

    #[test]
    fn shift_codeword_layout() {
        let p = ShiftLayerParams::new(4, 0);
        assert_eq!(p.zero_code(), 0b0111);
        assert_eq!(p.max_exponent(), 6);
        assert_eq!(p.encode(true, 3), 0b1011);
        assert_eq!(p.decode(0b1111), 0.0);
        assert_eq!(p.codewords().count(), 15);
    }

    #[test]
    fn fixed_point_examples() {
        assert_eq!(scan_point(0.9, 8), 7);
        assert_eq!(choose_fixed_point(&[0.9], 8), Ok(7));
        assert_eq!(choose_fixed_point(&[127.0], 8), Ok(0));
        assert_eq!(choose_fixed_point(&[-0.24], 4), Ok(4));
        assert_eq!(scan_point(0.24, 4), 4);
        assert_eq!(choose_fixed_point(&[0.0], 4), Err(QuantError::AllZeroWeights));
        for i in 1..500 {
            let m = i as f64 * 0.731;
            assert_eq!(choose_fixed_point(&[m], 6).unwrap(), scan_point(m, 6));
        }
    }

    #[test]
    fn fixed_quantization_examples() {
        assert_eq!(quantize_fixed(0.5, FixedFormat::new(8, 5)), 16);
        assert_eq!(0.26f64 * 32.0, 8.32);
        assert_eq!(quantize_fixed(0.26, FixedFormat::new(8, 5)), 8);
        assert_eq!(quantize_fixed(100.0, FixedFormat::new(4, 0)), 7);
        assert_eq!(quantize_fixed(-100.0, FixedFormat::new(4, 0)), -8);
        // half away from zero
        assert_eq!(quantize_fixed(-0.5 / 32.0, FixedFormat::new(8, 5)), -1);
    }

    #[test]
    fn fixed_code_two_complement_roundtrip() {
        let f = FixedFormat::new(5, 3);
        for m in f.min_mantissa()..=f.max_mantissa() {
            assert_eq!(f.mantissa(f.to_code(m)), m);
        }
        assert_eq!(f.to_code(-1), 0b11111);
    }

    #[test]
    fn bn_fusion_examples() {
        let id = fuse_bn(&BnParams::identity(1)).unwrap();
        assert_eq!(id[0], FusedAffine { scale: 256, offset: 0 });
        let bn = BnParams { gamma: vec![2.0], beta: vec![0.0], mean: vec![1.0], sigma: vec![0.5] };
        let f = fuse_bn(&bn).unwrap()[0];
        assert_eq!((f.scale_value(), f.offset_value()), (4.0, -4.0));
        let big = BnParams { gamma: vec![200.0], beta: vec![0.0], mean: vec![0.0], sigma: vec![1.0] };
        let f = fuse_bn(&big).unwrap()[0];
        assert_eq!(f.scale, i16::MAX);
        assert!((f.scale_value() - 127.996).abs() < 1e-3);
        let bad = BnParams { gamma: vec![1.0], beta: vec![0.0], mean: vec![0.0], sigma: vec![0.0] };
        assert!(matches!(fuse_bn(&bad), Err(QuantError::NonPositiveSigma { channel: 0, .. })));
    }

    #[test]
    fn activation_examples() {
        // values given at 13 fractional bits
        let at = |v: f64| (v * pow2(13)) as i128;
        assert_eq!(quantize_activation(at(-0.7), 13), 0);
        assert_eq!(quantize_activation(at(1.0), 13), 32);
        assert_eq!(quantize_activation(at(9.3), 13), 255);
        assert_eq!(quantize_activation(3, 0), 96);
    }

    #[test]
    fn rounding_helpers() {
        assert_eq!(round_shift(5, 1), 3);
        assert_eq!(round_shift(-5, 1), -3);
        assert_eq!(round_shift(4, 2), 1);
        assert_eq!(round_shift(6, 2), 2);
        assert_eq!(round_div(9, 2), 5);
        assert_eq!(round_div(-9, 2), -5);
        assert_eq!(round_div(10, 4), 3);
        assert_eq!(round_div(9, 4), 2);
    }

    #[test]
    fn requantize_folds_weight_point() {
        // acc = 72 at 5 fractional bits (2.25), identity BN
        assert_eq!(requantize(72, 5, Some(FusedAffine::IDENTITY)), 72);
        assert_eq!(requantize(72, 5, None), 72);
        // negative accumulator point: value 3 · 2^2 = 12.0 saturates
        assert_eq!(requantize(3, -2, None), 255);
    }

    #[test]
    fn integer_weights_rebase_on_smallest_exponent() {
        let p = ShiftLayerParams::new(4, 5);
        let codes = [p.encode(false, 3), p.encode(true, 5), p.zero_code()];
        let iw = integer_weights(&WeightFormat::Shift(p), &codes);
        assert_eq!(iw.multipliers, vec![1, -4, 0]);
        assert_eq!(iw.frac_bits, 2);
        for (c, m) in codes.iter().zip(&iw.multipliers) {
            assert_eq!(p.decode(*c), *m as f64 * pow2(-iw.frac_bits));
        }
    }

    #[test]
    fn wide_exponent_spread_saturates() {
        let p = ShiftLayerParams::new(8, 120);
        let codes = [p.encode(false, 0), p.encode(true, 100)];
        let iw = integer_weights(&WeightFormat::Shift(p), &codes);
        assert_eq!(iw.multipliers, vec![1, i32::MIN]);
        assert!(iw.max_abs() >= 1 << 31);
    }
}
