//! Greedy hybrid-quantization search.
//!
//! Starting from 8-bit fixed point everywhere, each step takes the single
//! change (one layer one bit narrower, or its arithmetic swapped) with the
//! largest drop in the hardware cost key, fine-tunes for it and keeps it if
//! accuracy stays within budget. A rejected change retires its layer.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::engine::train::{finetune_ste, TrainOptions};
use crate::engine::{Dataset, EngineError, QuantizedModel};
use crate::model::{ModelParams, NetworkSpec};
use crate::planner::UnrollPlan;
use crate::quant::{LayerQuant, QuantConfig};

pub const DEFAULT_MIN_BITS: u8 = 3;
pub const DEFAULT_MAX_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Change {
    Decrement,
    Toggle,
}

impl fmt::Display for Change {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Change::Decrement => "decrement",
            Change::Toggle => "toggle",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Minimum accepted accuracy, absolute.
    pub alpha_budget: f64,
    /// Cost key at or below which the search stops early.
    pub h_budget: f64,
    pub epochs: usize,
    pub min_bits: u8,
    pub max_bits: u8,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            alpha_budget: 0.0,
            h_budget: 0.0,
            epochs: 3,
            min_bits: DEFAULT_MIN_BITS,
            max_bits: DEFAULT_MAX_BITS,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let ok = (0.0..=1.0).contains(&self.alpha_budget)
            && self.min_bits >= crate::quant::MIN_BITS
            && self.min_bits <= self.max_bits
            && self.max_bits <= crate::quant::MAX_BITS
            && self.h_budget.is_finite();
        if ok {
            Ok(())
        } else {
            Err(EngineError::Inconsistent("search configuration out of range".into()))
        }
    }

    fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions { epochs: self.epochs, learning_rate: self.learning_rate, batch_size: self.batch_size, seed }
    }
}

/// One candidate: a configuration differing from the current one in exactly
/// one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub layer: usize,
    pub change: Change,
    pub config: QuantConfig,
}

/// Neighbors of `q` over the layers in `active`, ordered by layer index with
/// the decrement before the toggle.
pub fn neighborhood(q: &QuantConfig, active: &BTreeSet<usize>, min_bits: u8) -> Vec<Neighbor> {
    let mut out = Vec::new();
    for &l in active {
        let Some(cur) = q.get(l) else { continue };
        if cur.bits > min_bits {
            let mut c = q.clone();
            c.layers[l] = Some(LayerQuant::new(cur.arith, cur.bits - 1));
            out.push(Neighbor { layer: l, change: Change::Decrement, config: c });
        }
        let mut c = q.clone();
        c.layers[l] = Some(LayerQuant::new(cur.arith.toggled(), cur.bits));
        out.push(Neighbor { layer: l, change: Change::Toggle, config: c });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub step: usize,
    pub layer: usize,
    pub change: Change,
    pub from: LayerQuant,
    pub to: LayerQuant,
    pub alpha: f64,
    pub cost_before: f64,
    pub cost_after: f64,
    pub accepted: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Every layer was retired by a rejection.
    LayersExhausted,
    /// No remaining change lowers the cost.
    NoCheaperNeighbor,
    /// An accepted configuration met the hardware budget.
    BudgetReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub initial_cost: f64,
    pub steps: Vec<SearchStep>,
    pub termination: Termination,
}

impl SearchTrace {
    pub fn accepted(&self) -> impl Iterator<Item = &SearchStep> {
        self.steps.iter().filter(|s| s.accepted)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# initial cost {:.2}\n", self.initial_cost);
        out += "step layer change    from      to        alpha    cost_before  cost_after   result    seed\n";
        for s in &self.steps {
            out += &format!(
                "{:<4} {:<5} {:<9} {:<9} {:<9} {:<8.4} {:<12.2} {:<12.2} {:<9} {}\n",
                s.step,
                s.layer,
                s.change,
                s.from.to_string(),
                s.to.to_string(),
                s.alpha,
                s.cost_before,
                s.cost_after,
                if s.accepted { "accept" } else { "reject" },
                s.seed
            );
        }
        out += &format!("# termination {:?}\n", self.termination);
        out
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub config: QuantConfig,
    pub params: ModelParams,
    pub trace: SearchTrace,
}

/// Seed for the fine-tuning run of a given step.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Upper bound on the number of steps for `layers` weighted layers.
pub fn step_bound(layers: usize, cfg: &SearchConfig) -> usize {
    layers * ((cfg.max_bits - cfg.min_bits) as usize + 2) * 2
}

fn implementable(net: &NetworkSpec, params: &ModelParams, q: &QuantConfig) -> bool {
    QuantizedModel::quantize(net, params, q).and_then(|m| m.datapaths()).is_ok()
}

#[allow(clippy::too_many_arguments)]
pub fn search(
    net: &NetworkSpec,
    params: &ModelParams,
    q0: &QuantConfig,
    cfg: &SearchConfig,
    plan: &UnrollPlan,
    cost: &CostModel,
    train: &Dataset,
    val: &Dataset,
) -> Result<SearchOutcome, EngineError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    if !q0.check(net) {
        return Err(EngineError::Inconsistent("initial configuration does not match the network".into()));
    }
    let mut q = q0.clone();
    let mut theta = params.clone();
    let mut active: BTreeSet<usize> = (0..net.layers.len()).filter(|&l| q.get(l).is_some()).collect();
    let mut current = cost.key(net, &q, plan);
    let initial_cost = current;
    let mut steps = Vec::new();

    let termination = loop {
        if active.is_empty() {
            break Termination::LayersExhausted;
        }
        // strict reduction only: equal-cost moves could cycle forever
        let best = neighborhood(&q, &active, cfg.min_bits)
            .into_iter()
            .map(|n| {
                let k = cost.key(net, &n.config, plan);
                (n, k)
            })
            .filter(|(n, k)| *k < current && implementable(net, &theta, &n.config))
            .fold(None::<(Neighbor, f64)>, |best, cand| match best {
                Some(b) if b.1 <= cand.1 => Some(b),
                _ => Some(cand),
            });
        let Some((cand, cand_cost)) = best else {
            break Termination::NoCheaperNeighbor;
        };

        let seed = step_seed(cfg.seed, steps.len());
        let (theta2, acc) = finetune_ste(net, &theta, &cand.config, train, val, &cfg.train_options(seed))?;
        let accepted = acc.top1 >= cfg.alpha_budget;
        steps.push(SearchStep {
            step: steps.len(),
            layer: cand.layer,
            change: cand.change,
            from: q.get(cand.layer).expect("active layers are weighted"),
            to: cand.config.get(cand.layer).expect("active layers are weighted"),
            alpha: acc.top1,
            cost_before: current,
            cost_after: cand_cost,
            accepted,
            seed,
        });
        if accepted {
            q = cand.config;
            theta = theta2;
            current = cand_cost;
            if current <= cfg.h_budget {
                break Termination::BudgetReached;
            }
        } else {
            active.remove(&cand.layer);
        }
    };
    Ok(SearchOutcome { config: q, params: theta, trace: SearchTrace { initial_cost, steps, termination } })
}

/// Re-runs the accepted steps of a trace from the original parameters and
/// returns the final parameters and the accuracy of each replayed step.
pub fn replay(
    net: &NetworkSpec,
    params: &ModelParams,
    q0: &QuantConfig,
    cfg: &SearchConfig,
    trace: &SearchTrace,
    train: &Dataset,
    val: &Dataset,
) -> Result<(QuantConfig, ModelParams, Vec<f64>), EngineError> {
    let mut q = q0.clone();
    let mut theta = params.clone();
    let mut alphas = Vec::new();
    for s in trace.accepted() {
        let mut next = q.clone();
        next.layers[s.layer] = Some(s.to);
        let (t, acc) = finetune_ste(net, &theta, &next, train, val, &cfg.train_options(s.seed))?;
        alphas.push(acc.top1);
        q = next;
        theta = t;
    }
    Ok((q, theta, alphas))
}
