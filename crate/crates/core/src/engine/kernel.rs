//! Integer multiply/shift-accumulate kernel shared by the engine and the
//! stream simulator.

use super::LayerDatapath;
use crate::model::{LayerKind, LayerSpec};
use crate::quant::{self, ACT_MAX_CODE};

type Shift = Option<(bool, u32)>;

#[derive(Debug, Clone)]
pub(crate) struct Kernel {
    kind: LayerKind,
    taps: usize,
    in_channels: usize,
    out_channels: usize,
    /// Fixed-point multipliers; dense layers as `[tap][ci][co]`, depthwise
    /// as `[ch][tap]`.
    mult: Vec<i32>,
    shifts: Option<Vec<Shift>>,
}

impl Kernel {
    pub fn new(spec: &LayerSpec, path: &LayerDatapath) -> Self {
        let (k, c, co) = (spec.kernel, spec.in_channels, spec.out_channels);
        let taps = k * k;
        let (mult, shifts) = match (&path.weights, spec.kind) {
            (None, _) => (Vec::new(), None),
            (Some(w), LayerKind::DepthwiseConv) => (w.multipliers.clone(), w.shifts.clone()),
            (Some(w), _) => {
                let mut m = vec![0i32; w.multipliers.len()];
                let mut s = w.shifts.as_ref().map(|_| vec![None; w.multipliers.len()]);
                for o in 0..co {
                    for i in 0..c {
                        for tap in 0..taps {
                            let src = (o * c + i) * taps + tap;
                            let dst = (tap * c + i) * co + o;
                            m[dst] = w.multipliers[src];
                            if let (Some(d), Some(orig)) = (s.as_mut(), w.shifts.as_ref()) {
                                d[dst] = orig[src];
                            }
                        }
                    }
                }
                (m, s)
            }
        };
        Self { kind: spec.kind, taps, in_channels: c, out_channels: co, mult, shifts }
    }

    /// Adds the contribution of input channels `c0..c0 + x.len()` of one
    /// pixel seen through kernel tap `tap`.
    pub fn accumulate(&self, acc: &mut [i32], tap: usize, c0: usize, x: &[u8]) {
        match self.kind {
            LayerKind::AvgPool => {
                for (a, &v) in acc[c0..c0 + x.len()].iter_mut().zip(x) {
                    *a += v as i32;
                }
            }
            LayerKind::DepthwiseConv => {
                for (i, (a, &v)) in acc[c0..c0 + x.len()].iter_mut().zip(x).enumerate() {
                    let widx = (c0 + i) * self.taps + tap;
                    *a += match &self.shifts {
                        Some(s) => shifted(v, s[widx]),
                        None => v as i32 * self.mult[widx],
                    };
                }
            }
            _ => {
                let co = self.out_channels;
                for (i, &v) in x.iter().enumerate() {
                    if v == 0 {
                        continue;
                    }
                    let base = (tap * self.in_channels + c0 + i) * co;
                    match &self.shifts {
                        Some(s) => {
                            for (a, sh) in acc.iter_mut().zip(&s[base..base + co]) {
                                *a += shifted(v, *sh);
                            }
                        }
                        None => {
                            let v = v as i32;
                            for (a, m) in acc.iter_mut().zip(&self.mult[base..base + co]) {
                                *a += v * m;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Shift layers multiply by shifting the activation.
#[inline]
fn shifted(x: u8, s: Shift) -> i32 {
    match s {
        None => 0,
        Some((neg, sh)) => {
            let v = (x as i32) << sh;
            if neg {
                -v
            } else {
                v
            }
        }
    }
}

/// Turns one accumulator into an activation code: pooling averages over the
/// window area, everything else goes through batch norm and requantization.
pub(crate) fn finish_value(spec: &LayerSpec, path: &LayerDatapath, channel: usize, acc: i32) -> u8 {
    match spec.kind {
        LayerKind::AvgPool => {
            let area = (spec.kernel * spec.kernel) as i64;
            quant::round_div(acc as i64, area).clamp(0, ACT_MAX_CODE as i64) as u8
        }
        _ => quant::requantize(acc as i64, path.acc_frac, path.bn.as_ref().map(|bn| bn[channel])),
    }
}
