//! Splitting the pipeline across devices. Cuts follow pipeline order, so a
//! first-fit walk is enough: keep adding layers to the current device until
//! the next one would exceed a budget, then cut.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{PlanError, UnrollPlan};
use crate::cost::CostReport;
use crate::model::NetworkSpec;

/// Activation width crossing a link, in bits per channel.
const LINK_ACT_BITS: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceAssignment {
    pub layers: Range<usize>,
    pub cost: CostReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub devices: Vec<DeviceAssignment>,
    /// Index of the first layer on each device after the first.
    pub cuts: Vec<usize>,
    pub link_latency: u64,
    /// Bits per transfer at each cut: one output block of the layer before it.
    pub payload_bits: Vec<u64>,
}

impl PartitionPlan {
    /// Extra end-to-end latency from the links; throughput is unchanged.
    pub fn added_latency(&self) -> u64 {
        self.cuts.len() as u64 * self.link_latency
    }
}

/// Link latency in cycles for a delay in milliseconds at a clock in MHz,
/// rounded up.
pub fn link_latency_cycles(ms: f64, mhz: f64) -> u64 {
    let cycles = ms * mhz * 1e3;
    // absorb representation error so exact products do not round up
    (cycles - 1e-9).ceil().max(0.0) as u64
}

pub fn partition(
    net: &NetworkSpec,
    plan: &UnrollPlan,
    costs: &[CostReport],
    budgets: &[CostReport],
    link_latency: u64,
) -> Result<PartitionPlan, PlanError> {
    if costs.len() != net.layers.len() || plan.layers.len() != net.layers.len() {
        return Err(PlanError::Mismatch("cost and plan rows must match the layers".into()));
    }
    if budgets.is_empty() {
        return Err(PlanError::Infeasible("no devices".into()));
    }
    for (i, c) in costs.iter().enumerate() {
        if !budgets.iter().any(|b| c.fits(b)) {
            return Err(PlanError::Infeasible(format!("layer {i} exceeds every device budget")));
        }
    }
    let mut devices = Vec::new();
    let mut start = 0;
    let mut acc = CostReport::default();
    let mut i = 0;
    while i < costs.len() {
        let budget = budgets.get(devices.len()).ok_or_else(|| {
            PlanError::Infeasible(format!("layers from {start} onwards do not fit in {} devices", budgets.len()))
        })?;
        let next = acc + costs[i];
        if next.fits(budget) {
            acc = next;
            i += 1;
            continue;
        }
        if i == start {
            return Err(PlanError::Infeasible(format!("layer {i} does not fit on device {}", devices.len())));
        }
        devices.push(DeviceAssignment { layers: start..i, cost: acc });
        start = i;
        acc = CostReport::default();
    }
    if start < costs.len() || devices.is_empty() {
        devices.push(DeviceAssignment { layers: start..costs.len(), cost: acc });
    }
    let cuts: Vec<usize> = devices.iter().skip(1).map(|d| d.layers.start).collect();
    let payload_bits = cuts.iter().map(|&c| plan.layers[c - 1].u_out as u64 * LINK_ACT_BITS).collect();
    Ok(PartitionPlan { devices, cuts, link_latency, payload_bits })
}
