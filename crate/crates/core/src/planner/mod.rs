//! Throughput matching: per-layer unroll factors derived from the input
//! pixel rate, so every core consumes exactly what its predecessor produces.

pub mod partition;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LayerSpec, NetworkSpec};

pub use partition::{link_latency_cycles, partition, DeviceAssignment, PartitionPlan};

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("invalid input pixel rate {0:?}: expected `1` or `1/D` with D >= 1")]
    BadIpp(String),
    #[error("plan does not match the network: {0}")]
    Mismatch(String),
    #[error("malformed plan table, line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("partition infeasible: {0}")]
    Infeasible(String),
}

/// Input pixel rate `1/D`: one input pixel every `D` cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ipp {
    pub denominator: u64,
}

impl Ipp {
    pub const FULL: Ipp = Ipp { denominator: 1 };

    pub fn new(denominator: u64) -> Result<Self, PlanError> {
        if denominator == 0 {
            return Err(PlanError::BadIpp(format!("1/{denominator}")));
        }
        Ok(Self { denominator })
    }
}

impl FromStr for Ipp {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, PlanError> {
        let bad = || PlanError::BadIpp(s.to_string());
        let t = s.trim();
        let d = match t.split_once('/') {
            None if t == "1" => 1,
            None => return Err(bad()),
            Some((num, den)) => {
                if num.trim() != "1" {
                    return Err(bad());
                }
                den.trim().parse::<u64>().map_err(|_| bad())?
            }
        };
        Ipp::new(d).map_err(|_| bad())
    }
}

impl fmt::Display for Ipp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denominator == 1 {
            write!(f, "1")
        } else {
            write!(f, "1/{}", self.denominator)
        }
    }
}

/// Unroll factors and pixel intervals of one layer core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerUnroll {
    /// Input channels consumed per cycle.
    pub u: usize,
    /// Output channels through batch norm per cycle.
    pub u_out: usize,
    /// Cycles between consecutive input pixels.
    pub t_in: u64,
    /// Cycles between consecutive output pixels.
    pub t_out: u64,
}

impl LayerUnroll {
    /// Cycles to stream every input channel of one pixel.
    pub fn input_phases(&self, spec: &LayerSpec) -> usize {
        spec.in_channels.div_ceil(self.u)
    }

    /// Cycles to push every output channel of one pixel through batch norm.
    pub fn output_phases(&self, spec: &LayerSpec) -> usize {
        spec.out_channels.div_ceil(self.u_out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnrollPlan {
    pub ipp: Ipp,
    pub layers: Vec<LayerUnroll>,
}

fn unroll_for(channels: usize, interval: u64) -> usize {
    (channels as u64).div_ceil(interval).clamp(1, channels.max(1) as u64) as usize
}

/// Derives the unroll plan for a network fed at `ipp`.
pub fn match_throughput(net: &NetworkSpec, ipp: Ipp) -> UnrollPlan {
    let mut t_in = ipp.denominator;
    let layers = net
        .layers
        .iter()
        .map(|spec| {
            let t_out = t_in * (spec.stride * spec.stride) as u64;
            let l = LayerUnroll {
                u: unroll_for(spec.in_channels, t_in),
                u_out: unroll_for(spec.out_channels, t_out),
                t_in,
                t_out,
            };
            t_in = t_out;
            l
        })
        .collect();
    UnrollPlan { ipp, layers }
}

impl UnrollPlan {
    /// Verifies the plan against a network: interval recurrence, unroll
    /// bounds and the ceiling rule.
    pub fn check(&self, net: &NetworkSpec) -> Result<(), PlanError> {
        let mismatch = |m: String| Err(PlanError::Mismatch(m));
        if self.layers.len() != net.layers.len() {
            return mismatch(format!("{} plan rows for {} layers", self.layers.len(), net.layers.len()));
        }
        let mut t_in = self.ipp.denominator;
        for (i, (spec, l)) in net.layers.iter().zip(&self.layers).enumerate() {
            let t_out = t_in * (spec.stride * spec.stride) as u64;
            if l.t_in != t_in || l.t_out != t_out {
                return mismatch(format!("layer {i}: intervals {}/{} but expected {t_in}/{t_out}", l.t_in, l.t_out));
            }
            if l.u != unroll_for(spec.in_channels, t_in) || l.u_out != unroll_for(spec.out_channels, t_out) {
                return mismatch(format!("layer {i}: unroll {}/{} is not throughput matched", l.u, l.u_out));
            }
            t_in = t_out;
        }
        Ok(())
    }

    /// Plain-text table: types, channels, unroll, cycles per pixel and pixel
    /// intervals, one row per layer.
    pub fn render_table(&self, net: &NetworkSpec) -> String {
        let rows: Vec<[String; 5]> = net
            .layers
            .iter()
            .zip(&self.layers)
            .map(|(spec, l)| {
                [
                    format!("{} / s{}", spec.kind.table_label(), spec.stride),
                    format!("{} / {}", spec.in_channels, spec.out_channels),
                    format!("{} / {}", l.u, l.u_out),
                    format!("{} / {}", l.input_phases(spec), l.output_phases(spec)),
                    format!("{} / {}", l.t_in, l.t_out),
                ]
            })
            .collect();
        let header = ["Types", "C / C'", "U / U'", "C/U / C'/U'", "T_in / T_out"];
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            format!("{}\n", parts.join(" | ").trim_end())
        };
        let mut out = format!("# ipp {}\n", self.ipp);
        out += &line(&header.map(String::from));
        out += &format!("{}\n", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        for r in &rows {
            out += &line(r);
        }
        out
    }

    /// Parses a table written by [`UnrollPlan::render_table`].
    pub fn parse_table(text: &str) -> Result<UnrollPlan, PlanError> {
        let mut ipp = None;
        let mut layers = Vec::new();
        let mut seen_header = false;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let err = |reason: &str| PlanError::Parse { line, reason: reason.to_string() };
            let t = raw.trim();
            if t.is_empty() || t.starts_with("--") {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("ipp") {
                    ipp = Some(v.trim().parse::<Ipp>().map_err(|_| err("bad ipp"))?);
                }
                continue;
            }
            let cells: Vec<&str> = t.split('|').map(str::trim).collect();
            if cells.len() != 5 {
                return Err(err("expected 5 columns"));
            }
            if !seen_header {
                seen_header = true;
                continue;
            }
            let pair = |cell: &str| -> Result<(u64, u64), PlanError> {
                let (a, b) = cell.split_once('/').ok_or_else(|| err("expected `a / b`"))?;
                let a = a.trim().parse().map_err(|_| err("not a number"))?;
                let b = b.trim().parse().map_err(|_| err("not a number"))?;
                Ok((a, b))
            };
            let (u, u_out) = pair(cells[2])?;
            let (t_in, t_out) = pair(cells[4])?;
            if u == 0 || u_out == 0 || t_in == 0 {
                return Err(err("zero unroll or interval"));
            }
            layers.push(LayerUnroll { u: u as usize, u_out: u_out as usize, t_in, t_out });
        }
        let ipp = ipp.ok_or(PlanError::Parse { line: 1, reason: "missing `# ipp` line".into() })?;
        Ok(UnrollPlan { ipp, layers })
    }
}
