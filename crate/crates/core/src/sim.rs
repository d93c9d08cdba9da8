//! Cycle-level model of the flattened streaming pipeline.
//!
//! Every layer is a core with three stages that all run each cycle:
//!
//! * input: takes one block of `U` channels from the inter-layer FIFO into
//!   a line buffer of `K + S` rows;
//! * compute: walks output windows in raster order, one input-channel block
//!   per cycle (`ceil(C/U)` cycles per window), once the block of the
//!   window's last input pixel has landed. Out-of-image taps read zero;
//! * batch norm: drains finished windows `U'` output channels per cycle into
//!   the next FIFO.
//!
//! Values written in a cycle become visible to readers in the next one.
//! Arithmetic is the golden engine's integer kernel, so the output stream
//! must equal [`crate::engine::forward_quant`] bit for bit.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::compute_units;
use crate::engine::{finish_value, EngineError, Kernel, LayerDatapath, QuantizedModel};
use crate::model::{LayerKind, LayerSpec};
use crate::planner::{LayerUnroll, UnrollPlan};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("plan does not match the network: {0}")]
    PlanMismatch(String),
    #[error("no progress for {idle} cycles at cycle {cycle}; pipeline deadlocked")]
    DeadlockDetected { cycle: u64, idle: u64 },
    #[error("image {index} has {actual} values, expected {expected}")]
    ImageShape { index: usize, expected: usize, actual: usize },
    #[error("no images to simulate")]
    NoImages,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// `(layer, cycles)`: extra transfer latency on the link feeding `layer`.
    pub link_delays: Vec<(usize, u64)>,
    /// Record a per-cycle CSV trace of compute activity.
    pub trace: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStats {
    pub units: u64,
    pub compute_cycles: u64,
    pub active_unit_cycles: u64,
    /// Unit-cycles lost to taps outside the image.
    pub padding_idle: u64,
    /// Unit-cycles lost to a final channel block narrower than `U`.
    pub slack_idle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub images: usize,
    /// Cycles between consecutive images at the input: `D·H·W`.
    pub input_period: u64,
    pub cycles_total: u64,
    pub cycles_input_consume: u64,
    pub stall_count: u64,
    pub input_stalls: u64,
    pub backpressure_stalls: u64,
    pub layers: Vec<LayerStats>,
    /// Output stream of the last layer, per image.
    pub outputs: Vec<Vec<i64>>,
    #[serde(skip)]
    pub trace: Option<String>,
}

impl SimReport {
    /// Pipeline fill: cycles after the last input until the last output.
    pub fn fill_cycles(&self) -> u64 {
        self.cycles_total - self.cycles_input_consume
    }

    /// Steady-state images per second at `clock_mhz`.
    pub fn frames_per_second(&self, clock_mhz: f64) -> f64 {
        clock_mhz * 1e6 / self.input_period as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUtilization {
    pub layer: usize,
    pub units: u64,
    pub active_unit_cycles: u64,
    pub utilization: f64,
    pub padding_idle: u64,
    pub slack_idle: u64,
    /// Line-buffer fill, stride gaps and waiting for input.
    pub other_idle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    /// Active unit-cycles over units × total cycles (includes fill and drain).
    pub gross: f64,
    /// Active unit-cycles over units × input cycles (`images · D·H·W`), or
    /// over the layer's busy cycles where odd feature-map sizes make it
    /// compute for longer than that.
    pub steady_state: f64,
    pub layers: Vec<LayerUtilization>,
}

/// Counting convention: one lane per shift/multiply-accumulate, `U·C'·K²`
/// for dense layers and `U·K²` for depthwise; pooling adders count none.
pub fn measure_utilization(report: &SimReport) -> Utilization {
    let window = report.images as u64 * report.input_period;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let layers = report
        .layers
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let capacity = s.units * window.max(s.compute_cycles);
            LayerUtilization {
                layer: i,
                units: s.units,
                active_unit_cycles: s.active_unit_cycles,
                utilization: ratio(s.active_unit_cycles, capacity),
                padding_idle: s.padding_idle,
                slack_idle: s.slack_idle,
                other_idle: capacity.saturating_sub(s.active_unit_cycles + s.padding_idle + s.slack_idle),
            }
        })
        .collect();
    let units: u64 = report.layers.iter().map(|s| s.units).sum();
    let active: u64 = report.layers.iter().map(|s| s.active_unit_cycles).sum();
    let capacity: u64 = report.layers.iter().map(|s| s.units * window.max(s.compute_cycles)).sum();
    Utilization { gross: ratio(active, units * report.cycles_total), steady_state: ratio(active, capacity), layers }
}

/// Inter-layer channel: one block deep, plus one slot per cycle of link delay.
struct Fifo {
    cap: usize,
    delay: u64,
    items: VecDeque<(u64, Vec<u8>)>,
}

impl Fifo {
    fn new(delay: u64) -> Self {
        Self { cap: 1 + delay as usize, delay, items: VecDeque::new() }
    }

    fn can_push(&self) -> bool {
        self.items.len() < self.cap
    }

    fn push(&mut self, cycle: u64, block: Vec<u8>) {
        self.items.push_back((cycle + 1 + self.delay, block));
    }

    fn visible(&self, cycle: u64) -> Option<&Vec<u8>> {
        self.items.front().filter(|(at, _)| *at <= cycle).map(|(_, b)| b)
    }
}

struct Finished {
    visible_at: u64,
    image: usize,
    acc: Vec<i32>,
}

struct Core {
    spec: LayerSpec,
    path: LayerDatapath,
    kernel: Kernel,
    logits: bool,
    u: usize,
    u_out: usize,
    blocks_in: usize,
    blocks_out: usize,
    lanes: usize,
    // line buffer
    cap_rows: u64,
    buf: Vec<u8>,
    row_id: Vec<u64>,
    written: Vec<u64>,
    in_pixel: u64,
    in_block: usize,
    // compute
    window: u64,
    total_windows: u64,
    phase: usize,
    acc: Vec<i32>,
    queue: VecDeque<Finished>,
    queue_cap: usize,
    // batch norm
    bn_block: usize,
    stats: LayerStats,
}

const NEVER: u64 = u64::MAX;

impl Core {
    fn new(spec: &LayerSpec, unroll: &LayerUnroll, path: LayerDatapath, logits: bool, images: usize) -> Self {
        let cap_rows = (spec.kernel + spec.stride) as u64;
        let row_len = spec.in_width * spec.in_channels;
        let blocks_in = unroll.input_phases(spec);
        let windows_per_image = (spec.out_height() * spec.out_width()) as u64;
        Self {
            kernel: Kernel::new(spec, &path),
            path,
            logits,
            u: unroll.u,
            u_out: unroll.u_out,
            blocks_in,
            blocks_out: unroll.output_phases(spec),
            lanes: match spec.kind {
                LayerKind::AvgPool => 0,
                LayerKind::DepthwiseConv => 1,
                _ => spec.out_channels,
            },
            cap_rows,
            buf: vec![0; cap_rows as usize * row_len],
            row_id: vec![NEVER; cap_rows as usize],
            written: vec![NEVER; cap_rows as usize * spec.in_width * blocks_in],
            in_pixel: 0,
            in_block: 0,
            window: 0,
            total_windows: windows_per_image * images as u64,
            phase: 0,
            acc: vec![0; spec.out_channels],
            queue: VecDeque::new(),
            queue_cap: if spec.stride > 1 { spec.out_width() + 2 } else { 2 },
            bn_block: 0,
            stats: LayerStats { units: compute_units(spec, unroll), ..Default::default() },
            spec: spec.clone(),
        }
    }

    fn windows_per_image(&self) -> u64 {
        (self.spec.out_height() * self.spec.out_width()) as u64
    }

    /// (image, oy, ox) of a global window index.
    fn window_coords(&self, w: u64) -> (u64, usize, usize) {
        let per = self.windows_per_image();
        let r = (w % per) as usize;
        (w / per, r / self.spec.out_width(), r % self.spec.out_width())
    }

    /// Lowest global input row still needed by the pending window.
    fn low_row(&self) -> u64 {
        if self.window >= self.total_windows {
            return NEVER / 2;
        }
        let (img, oy, _) = self.window_coords(self.window);
        let top = (oy * self.spec.stride).saturating_sub(self.spec.padding);
        img * self.spec.in_height as u64 + top as u64
    }

    fn block_ready(&self, pixel: u64, block: usize, cycle: u64) -> bool {
        let w = self.spec.in_width as u64;
        let row = pixel / w;
        let slot = (row % self.cap_rows) as usize;
        let x = (pixel % w) as usize;
        self.row_id[slot] == row && self.written[(slot * self.spec.in_width + x) * self.blocks_in + block] < cycle
    }

    /// Accepts one block from the input FIFO if the line buffer has room.
    /// Returns (progress, blocked).
    fn input_stage(&mut self, fifo: &mut Fifo, cycle: u64) -> (bool, bool) {
        let Some(block) = fifo.visible(cycle) else { return (false, false) };
        let w = self.spec.in_width as u64;
        let row = self.in_pixel / w;
        if row >= self.low_row() + self.cap_rows {
            return (false, true);
        }
        let slot = (row % self.cap_rows) as usize;
        if self.row_id[slot] != row {
            self.row_id[slot] = row;
            let n = self.spec.in_width * self.blocks_in;
            self.written[slot * n..(slot + 1) * n].fill(NEVER);
        }
        let x = (self.in_pixel % w) as usize;
        let c = self.spec.in_channels;
        let c0 = self.in_block * self.u;
        let base = (slot * self.spec.in_width + x) * c + c0;
        self.buf[base..base + block.len()].copy_from_slice(block);
        self.written[(slot * self.spec.in_width + x) * self.blocks_in + self.in_block] = cycle;
        fifo.items.pop_front();
        self.in_block += 1;
        if self.in_block == self.blocks_in {
            self.in_block = 0;
            self.in_pixel += 1;
        }
        (true, false)
    }

    /// Runs one input-channel phase of the pending window if its data is in.
    fn compute_stage(&mut self, layer: usize, cycle: u64, trace: Option<&mut String>) -> bool {
        if self.window >= self.total_windows {
            return false;
        }
        if self.phase == 0 && self.queue.len() >= self.queue_cap {
            return false;
        }
        let s = &self.spec;
        let (img, oy, ox) = self.window_coords(self.window);
        let (h, w, k) = (s.in_height, s.in_width, s.kernel);
        let reach = |o: usize, n: usize| (o * s.stride + k - 1).saturating_sub(s.padding).min(n - 1);
        let (ty, tx) = (reach(oy, h), reach(ox, w));
        let image_base = img * (h * w) as u64;
        if !self.block_ready(image_base + (ty * w + tx) as u64, self.phase, cycle) {
            return false;
        }
        if self.phase == 0 {
            self.acc.fill(0);
        }
        let c0 = self.phase * self.u;
        let len = self.u.min(s.in_channels - c0);
        let mut inside = 0u64;
        for ky in 0..k {
            let iy = (oy * s.stride + ky) as isize - s.padding as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let row = img * h as u64 + iy as u64;
            let slot = (row % self.cap_rows) as usize;
            debug_assert_eq!(self.row_id[slot], row);
            for kx in 0..k {
                let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let base = (slot * w + ix as usize) * s.in_channels + c0;
                self.kernel.accumulate(&mut self.acc, ky * k + kx, c0, &self.buf[base..base + len]);
                inside += 1;
            }
        }
        let lanes = self.lanes as u64;
        let taps = (k * k) as u64;
        let active = inside * len as u64 * lanes;
        self.stats.compute_cycles += 1;
        self.stats.active_unit_cycles += active;
        self.stats.padding_idle += (taps - inside) * len as u64 * lanes;
        self.stats.slack_idle += taps * (self.u - len) as u64 * lanes;
        if let Some(t) = trace {
            let _ = writeln!(t, "{cycle},{layer},{},{active}", self.phase);
        }
        self.phase += 1;
        if self.phase == self.blocks_in {
            self.phase = 0;
            self.queue.push_back(Finished { visible_at: cycle + 1, image: img as usize, acc: self.acc.clone() });
            self.window += 1;
        }
        true
    }

    /// Emits one block of `U'` output channels. Returns (progress, blocked).
    fn bn_stage(&mut self, cycle: u64, next: Option<&mut Fifo>, outputs: &mut [Vec<i64>]) -> (bool, bool) {
        let Some(head) = self.queue.front().filter(|f| f.visible_at <= cycle) else { return (false, false) };
        let c0 = self.bn_block * self.u_out;
        let c1 = (c0 + self.u_out).min(self.spec.out_channels);
        match next {
            Some(fifo) => {
                if !fifo.can_push() {
                    return (false, true);
                }
                let block = (c0..c1).map(|c| finish_value(&self.spec, &self.path, c, head.acc[c])).collect();
                fifo.push(cycle, block);
            }
            None => {
                let out = &mut outputs[head.image];
                if self.logits {
                    out.extend(head.acc[c0..c1].iter().map(|&a| a as i64));
                } else {
                    out.extend((c0..c1).map(|c| finish_value(&self.spec, &self.path, c, head.acc[c]) as i64));
                }
            }
        }
        self.bn_block += 1;
        if self.bn_block == self.blocks_out {
            self.bn_block = 0;
            self.queue.pop_front();
        }
        (true, false)
    }
}

/// Streams `images` (HWC activation codes) through the pipeline.
pub fn simulate(
    model: &QuantizedModel,
    plan: &UnrollPlan,
    images: &[Vec<u8>],
    opts: &SimOptions,
) -> Result<SimReport, SimError> {
    let net = &model.net;
    plan.check(net).map_err(|e| SimError::PlanMismatch(e.to_string()))?;
    if images.is_empty() {
        return Err(SimError::NoImages);
    }
    let in_len = net.input_shape.len();
    if let Some((index, img)) = images.iter().enumerate().find(|(_, i)| i.len() != in_len) {
        return Err(SimError::ImageShape { index, expected: in_len, actual: img.len() });
    }
    let paths = model.datapaths()?;
    let n_layers = net.layers.len();
    if n_layers == 0 {
        return Err(SimError::PlanMismatch("network has no layers".into()));
    }
    let mut cores: Vec<Core> = net
        .layers
        .iter()
        .zip(&plan.layers)
        .zip(paths)
        .enumerate()
        .map(|(i, ((spec, u), path))| Core::new(spec, u, path, net.is_logit_layer(i), images.len()))
        .collect();
    let delay_of = |l: usize| opts.link_delays.iter().filter(|(at, _)| *at == l).map(|(_, d)| *d).sum::<u64>();
    let mut fifos: Vec<Fifo> = (0..n_layers).map(|l| Fifo::new(delay_of(l))).collect();
    let mut outputs = vec![Vec::new(); images.len()];
    let mut trace = opts.trace.then(|| String::from("cycle,layer,phase,active_units\n"));

    let d = plan.ipp.denominator;
    let pixels_per_image = net.input_shape.pixels() as u64;
    let total_pixels = pixels_per_image * images.len() as u64;
    let (c0_channels, u0) = (net.input_shape.channels, plan.layers[0].u);
    let src_blocks = c0_channels.div_ceil(u0);
    let (mut src_pixel, mut src_block) = (0u64, 0usize);

    let last = n_layers - 1;
    let expected_out = cores[last].total_windows * cores[last].blocks_out as u64;
    let mut emitted = 0u64;
    let (mut input_stalls, mut backpressure) = (0u64, 0u64);
    let (mut last_push, mut last_emit) = (0u64, 0u64);
    let max_delay = opts.link_delays.iter().map(|(_, d)| *d).max().unwrap_or(0);
    let watchdog = 4 * cores.iter().map(|c| (c.blocks_in + c.blocks_out) as u64).max().unwrap_or(1) + 4 * d + max_delay + 64;
    let mut idle_since = 0u64;

    let mut cycle = 0u64;
    while emitted < expected_out {
        let mut progress = false;
        for l in (0..n_layers).rev() {
            let (before, after) = fifos.split_at_mut(l + 1);
            let next = after.first_mut();
            let core = &mut cores[l];
            let (p, blocked) = core.bn_stage(cycle, next, &mut outputs);
            if p && l == last {
                emitted += 1;
                last_emit = cycle;
            }
            progress |= p;
            backpressure += blocked as u64;
            progress |= core.compute_stage(l, cycle, trace.as_mut());
            let (p, blocked) = core.input_stage(&mut before[l], cycle);
            progress |= p;
            backpressure += blocked as u64;
        }
        if src_pixel < total_pixels && cycle >= src_pixel * d + src_block as u64 {
            if fifos[0].can_push() {
                let img = &images[(src_pixel / pixels_per_image) as usize];
                let base = (src_pixel % pixels_per_image) as usize * c0_channels + src_block * u0;
                let end = (base + u0).min((src_pixel % pixels_per_image + 1) as usize * c0_channels);
                fifos[0].push(cycle, img[base..end].to_vec());
                last_push = cycle;
                progress = true;
                src_block += 1;
                if src_block == src_blocks {
                    src_block = 0;
                    src_pixel += 1;
                }
            } else {
                input_stalls += 1;
            }
        }
        if progress {
            idle_since = cycle;
        } else if cycle - idle_since > watchdog {
            return Err(SimError::DeadlockDetected { cycle, idle: cycle - idle_since });
        }
        cycle += 1;
    }

    Ok(SimReport {
        images: images.len(),
        input_period: d * pixels_per_image,
        cycles_total: last_emit + 1,
        cycles_input_consume: last_push + 1,
        stall_count: input_stalls + backpressure,
        input_stalls,
        backpressure_stalls: backpressure,
        layers: cores.iter().map(|c| c.stats).collect(),
        outputs,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::forward_quant;
    use crate::model::{zoo, ModelParams};
    use crate::planner::{match_throughput, Ipp};
    use crate::quant::QuantConfig;

    fn model(net: crate::model::NetworkSpec, seed: u64) -> QuantizedModel {
        let params: ModelParams = crate::engine::train::init_params(&net, seed);
        QuantizedModel::quantize(&net, &params, &QuantConfig::initial(&net)).unwrap()
    }

    #[test]
    fn identity_streams_through_with_three_cycles_of_fill() {
        let net = zoo::identity(4, 4, 1);
        let params = ModelParams {
            layers: vec![crate::model::LayerParams {
                weights: Some(crate::model::RealTensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap()),
                bn: None,
            }],
        };
        let m = QuantizedModel::quantize(&net, &params, &QuantConfig::initial(&net)).unwrap();
        let plan = match_throughput(&net, Ipp::FULL);
        let image: Vec<u8> = (0..16).map(|v| v * 7).collect();
        let r = simulate(&m, &plan, std::slice::from_ref(&image), &SimOptions::default()).unwrap();
        assert_eq!(r.outputs[0], image.iter().map(|&v| v as i64).collect::<Vec<_>>());
        assert_eq!((r.cycles_input_consume, r.cycles_total, r.stall_count), (16, 19, 0));
    }

    #[test]
    fn matches_engine_on_small_nets() {
        for (i, net) in [zoo::tiny_separable(), zoo::strided_pair(8, 3, 8, 4), zoo::toy_two_layer(3, 5, 4)].into_iter().enumerate() {
            let m = model(net.clone(), i as u64);
            let plan = match_throughput(&net, Ipp::FULL);
            let images: Vec<Vec<u8>> = (0..3u8).map(|s| (0..net.input_shape.len()).map(|v| ((v * 31 + s as usize * 17) % 97) as u8).collect()).collect();
            let r = simulate(&m, &plan, &images, &SimOptions::default()).unwrap();
            for (img, out) in images.iter().zip(&r.outputs) {
                assert_eq!(*out, forward_quant(&m, img).unwrap().output_stream());
            }
            assert_eq!(r.stall_count, 0, "{}", net.name);
        }
    }

    #[test]
    fn link_delay_adds_exact_latency() {
        let net = zoo::tiny_separable();
        let m = model(net.clone(), 4);
        let plan = match_throughput(&net, Ipp::FULL);
        let image = vec![9u8; net.input_shape.len()];
        let base = simulate(&m, &plan, std::slice::from_ref(&image), &SimOptions::default()).unwrap();
        let opts = SimOptions { link_delays: vec![(2, 37)], trace: false };
        let cut = simulate(&m, &plan, &[image], &opts).unwrap();
        assert_eq!(cut.cycles_total, base.cycles_total + 37);
        assert_eq!(cut.outputs, base.outputs);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let net = zoo::tiny_separable();
        let m = model(net.clone(), 1);
        let mut plan = match_throughput(&net, Ipp::FULL);
        assert!(matches!(simulate(&m, &plan, &[], &SimOptions::default()), Err(SimError::NoImages)));
        assert!(matches!(simulate(&m, &plan, &[vec![0; 3]], &SimOptions::default()), Err(SimError::ImageShape { .. })));
        plan.layers[1].u_out += 1;
        let img = vec![0; net.input_shape.len()];
        assert!(matches!(simulate(&m, &plan, &[img], &SimOptions::default()), Err(SimError::PlanMismatch(_))));
    }

    #[test]
    fn trace_lists_compute_cycles() {
        let net = zoo::identity(2, 2, 1);
        let m = model(net.clone(), 0);
        let plan = match_throughput(&net, Ipp::FULL);
        let r = simulate(&m, &plan, &[vec![1; 4]], &SimOptions { trace: true, ..Default::default() }).unwrap();
        let t = r.trace.unwrap();
        assert_eq!(t.lines().count(), 5);
        assert!(t.starts_with("cycle,layer,phase,active_units\n2,0,0,1\n"));
    }
}
