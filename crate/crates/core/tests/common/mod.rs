//! Independent oracles and fixture generators shared by the integration
//! tests. Nothing here calls into the engine's arithmetic: values are decoded
//! to `f64` and recomputed the slow, obvious way.

#![allow(dead_code)]

use flatstream::engine::{Dataset, QuantizedModel};
use flatstream::model::{BnParams, LayerKind, LayerParams, LayerSpec, ModelParams, NetworkSpec, RealTensor, Shape3};
use flatstream::quant::{Arithmetic, LayerQuant, QuantConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn layer(kind: LayerKind, input: Shape3, kernel: usize, stride: usize, padding: usize, out: usize, bn: bool) -> LayerSpec {
    LayerSpec {
        kind,
        kernel,
        stride,
        in_channels: input.channels,
        out_channels: out,
        in_height: input.height,
        in_width: input.width,
        padding,
        has_bn: bn,
        has_relu: bn,
    }
}

/// A random desk-scale chain: at most five layers, at most 16 channels and
/// feature maps no larger than 12×12.
pub fn random_net(rng: &mut ChaCha8Rng, tag: usize) -> NetworkSpec {
    let h = rng.gen_range(3..=12);
    let w = if rng.gen_bool(0.6) { h } else { rng.gen_range(3..=12) };
    let input = Shape3::new(h, w, rng.gen_range(1..=16));
    let depth = rng.gen_range(1..=5);
    let mut shape = input;
    let mut layers = Vec::new();
    while layers.len() < depth {
        let square = shape.height == shape.width;
        let spec = if shape.pixels() == 1 {
            let out = rng.gen_range(1..=16);
            layer(LayerKind::FullyConnected, shape, 1, 1, 0, out, false)
        } else if depth - layers.len() <= 2 && square && rng.gen_bool(0.5) {
            layer(LayerKind::AvgPool, shape, shape.height, 1, 0, shape.channels, false)
        } else {
            match rng.gen_range(0..3) {
                0 => {
                    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
                    let s = if k == 3 && shape.height >= 4 && shape.width >= 4 && rng.gen_bool(0.4) { 2 } else { 1 };
                    let out = rng.gen_range(1..=16);
                    layer(LayerKind::Conv, shape, k, s, k / 2, out, rng.gen_bool(0.7))
                }
                1 => {
                    let s = if shape.height >= 4 && shape.width >= 4 && rng.gen_bool(0.3) { 2 } else { 1 };
                    let p = if rng.gen_bool(0.8) { 1 } else { 0 };
                    if p == 0 && (shape.height < 3 || shape.width < 3) {
                        continue;
                    }
                    layer(LayerKind::DepthwiseConv, shape, 3, s, p, shape.channels, rng.gen_bool(0.7))
                }
                _ => {
                    let out = rng.gen_range(1..=16);
                    layer(LayerKind::PointwiseConv, shape, 1, 1, 0, out, rng.gen_bool(0.7))
                }
            }
        };
        shape = spec.out_shape();
        layers.push(spec);
    }
    let classes = shape.len();
    NetworkSpec::new(format!("random_{tag}"), input, classes, layers).expect("generator builds valid chains")
}

/// Gaussian-ish weights and non-trivial batch-norm statistics.
pub fn random_params(net: &NetworkSpec, rng: &mut ChaCha8Rng) -> ModelParams {
    let layers = net
        .layers
        .iter()
        .map(|spec| {
            let weights = spec.weight_shape().map(|shape| {
                let n: usize = shape.iter().product();
                let scale = (2.0 / spec.fan_in() as f64).sqrt();
                let data = (0..n).map(|_| (rng.gen::<f64>() - rng.gen::<f64>()) * 2.0 * scale).collect();
                RealTensor::new(shape.to_vec(), data).unwrap()
            });
            let bn = spec.has_bn.then(|| {
                let c = spec.out_channels;
                BnParams {
                    gamma: (0..c).map(|_| rng.gen_range(0.3..2.0)).collect(),
                    beta: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                    mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                    sigma: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
                }
            });
            LayerParams { weights, bn }
        })
        .collect();
    ModelParams { layers }
}

pub fn random_config(net: &NetworkSpec, rng: &mut ChaCha8Rng) -> QuantConfig {
    let mut q = QuantConfig::initial(net);
    for l in q.layers.iter_mut().flatten() {
        let arith = if rng.gen_bool(0.5) { Arithmetic::Shift } else { Arithmetic::Fixed };
        *l = LayerQuant::new(arith, rng.gen_range(3..=8));
    }
    q
}

pub fn random_image(net: &NetworkSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..net.input_shape.len()).map(|_| rng.gen_range(0..=255u8)).collect()
}

fn round_half_away(v: f64) -> f64 {
    v.signum() * (v.abs() + 0.5).floor()
}

fn to_code(v: f64) -> u8 {
    round_half_away(v * 32.0).clamp(0.0, 255.0) as u8
}

/// Output of the dyadic oracle: either activation codes or real-valued
/// logits of a final fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleOut {
    Codes(Vec<u8>),
    Logits(Vec<f64>),
}

/// Forward pass over decoded reals. Every quantity here is a dyadic
/// rational small enough for a double, so no rounding happens except at the
/// explicit requantization points.
pub fn dyadic_forward(model: &QuantizedModel, image: &[u8]) -> OracleOut {
    let net = &model.net;
    let mut x: Vec<f64> = image.iter().map(|&c| c as f64 / 32.0).collect();
    for (i, (spec, ql)) in net.layers.iter().zip(&model.layers).enumerate() {
        let (h, w, c) = (spec.in_height as isize, spec.in_width as isize, spec.in_channels);
        let (oh, ow, co) = (spec.out_height(), spec.out_width(), spec.out_channels);
        let (k, s, p) = (spec.kernel as isize, spec.stride as isize, spec.padding as isize);
        let wts: Vec<f64> = ql.weights.as_ref().map(|t| t.codes.iter().map(|&cw| t.format.decode(cw)).collect()).unwrap_or_default();
        let mut acc = vec![0.0f64; oh * ow * co];
        for oy in 0..oh as isize {
            for ox in 0..ow as isize {
                for o in 0..co {
                    let mut sum = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = (oy * s + ky - p, ox * s + kx - p);
                            if iy < 0 || iy >= h || ix < 0 || ix >= w {
                                continue;
                            }
                            let px = ((iy * w + ix) as usize) * c;
                            let tap = (ky * k + kx) as usize;
                            let taps = (k * k) as usize;
                            match spec.kind {
                                LayerKind::AvgPool => sum += x[px + o],
                                LayerKind::DepthwiseConv => sum += x[px + o] * wts[o * taps + tap],
                                _ => {
                                    for ci in 0..c {
                                        sum += x[px + ci] * wts[(o * c + ci) * taps + tap];
                                    }
                                }
                            }
                        }
                    }
                    acc[(oy as usize * ow + ox as usize) * co + o] = sum;
                }
            }
        }
        if net.is_logit_layer(i) {
            return OracleOut::Logits(acc);
        }
        x = acc
            .iter()
            .enumerate()
            .map(|(idx, &a)| {
                let ch = idx % co;
                let code = match (spec.kind, &ql.bn) {
                    (LayerKind::AvgPool, _) => {
                        let area = (spec.kernel * spec.kernel) as f64;
                        round_half_away(a * 32.0 / area).clamp(0.0, 255.0) as u8
                    }
                    (_, Some(bn)) => to_code(a * bn[ch].scale_value() + bn[ch].offset_value()),
                    (_, None) => to_code(a),
                };
                code as f64 / 32.0
            })
            .collect();
    }
    OracleOut::Codes(x.iter().map(|v| (v * 32.0) as u8).collect())
}

/// Compares an engine output stream with the oracle; logits are compared as
/// reals at the accumulator's binary point.
pub fn matches_oracle(model: &QuantizedModel, stream: &[i64], oracle: &OracleOut) -> bool {
    match oracle {
        OracleOut::Codes(c) => stream.len() == c.len() && stream.iter().zip(c).all(|(&a, &b)| a == b as i64),
        OracleOut::Logits(l) => {
            let last = model.net.layers.len() - 1;
            let frac = model.datapaths().unwrap()[last].acc_frac;
            stream.len() == l.len() && stream.iter().zip(l).all(|(&a, &b)| a as f64 * 2f64.powi(-frac) == b)
        }
    }
}

/// Scalar re-implementation of top-1/top-5 over the oracle's outputs.
pub fn naive_accuracy(model: &QuantizedModel, data: &Dataset) -> (f64, f64) {
    let (mut t1, mut t5) = (0usize, 0usize);
    for s in &data.samples {
        let scores: Vec<f64> = match dyadic_forward(model, &s.image) {
            OracleOut::Codes(c) => c.iter().map(|&v| v as f64).collect(),
            OracleOut::Logits(l) => l,
        };
        let label = s.label as usize;
        // rank = number of classes that beat the label (ties go to the lower index)
        let mut rank = 0;
        for (j, &v) in scores.iter().enumerate() {
            if v > scores[label] || (v == scores[label] && j < label) {
                rank += 1;
            }
        }
        t1 += (rank == 0) as usize;
        t5 += (rank < 5) as usize;
    }
    let n = data.samples.len() as f64;
    (t1 as f64 / n, t5 as f64 / n)
}

/// Summary of a randomized equivalence campaign.
#[derive(Debug, Default)]
pub struct Campaign {
    pub nets: usize,
    pub images: usize,
    pub stalled_nets: usize,
    pub failures: Vec<String>,
}

/// Builds `count` random networks and checks simulator ≡ engine ≡ oracle on
/// each. Nets whose random weights fail the accumulator certificate are
/// redrawn.
pub fn equivalence_campaign(count: usize, seed: u64) -> Campaign {
    use flatstream::engine::forward_quant;
    use flatstream::planner::{match_throughput, Ipp};
    use flatstream::sim::{simulate, SimOptions};
    use rand::SeedableRng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Campaign::default();
    while out.nets < count {
        let net = random_net(&mut rng, out.nets);
        let params = random_params(&net, &mut rng);
        let q = random_config(&net, &mut rng);
        let Ok(model) = QuantizedModel::quantize(&net, &params, &q) else { continue };
        if model.datapaths().is_err() {
            continue;
        }
        let d = rng.gen_range(1..=3);
        let plan = match_throughput(&net, Ipp::new(d).unwrap());
        let images: Vec<Vec<u8>> = (0..2).map(|_| random_image(&net, &mut rng)).collect();
        let tag = format!("net {} ({}, ipp 1/{d}, {q})", out.nets, net.layers.iter().map(|l| l.kind.tag()).collect::<Vec<_>>().join("-"));
        match simulate(&model, &plan, &images, &SimOptions::default()) {
            Err(e) => out.failures.push(format!("{tag}: simulator error {e}")),
            Ok(report) => {
                if report.stall_count > 0 {
                    out.stalled_nets += 1;
                }
                for (img, sim_out) in images.iter().zip(&report.outputs) {
                    let engine = forward_quant(&model, img).unwrap().output_stream();
                    if *sim_out != engine {
                        out.failures.push(format!("{tag}: simulator differs from engine"));
                    }
                    if !matches_oracle(&model, &engine, &dyadic_forward(&model, img)) {
                        out.failures.push(format!("{tag}: engine differs from dyadic oracle"));
                    }
                }
            }
        }
        out.nets += 1;
        out.images += images.len();
    }
    out
}

// ---------------------------------------------------------------------------
// Quantizer properties

use flatstream::quant::{fuse_bn, WeightFormat};

pub const WEIGHT_PROPERTIES: [&str; 5] = ["idempotence", "fixed error bound", "shift relative error", "nearest codeword", "monotonicity"];

fn codeword_values(fmt: &WeightFormat) -> Vec<f64> {
    match fmt {
        WeightFormat::Shift(p) => p.codewords().map(|c| p.decode(c)).collect(),
        WeightFormat::Fixed(f) => f.codewords().map(|c| f.decode(c)).collect(),
    }
}

/// Properties violated by quantizing `w` (and `w2` for monotonicity).
pub fn weight_violations(fmt: &WeightFormat, w: f64, w2: f64) -> Vec<&'static str> {
    let mut bad = Vec::new();
    let c = fmt.quantize(w);
    let v = fmt.decode(c);
    if fmt.quantize(v) != c || fmt.decode(fmt.quantize(v)) != v {
        bad.push(WEIGHT_PROPERTIES[0]);
    }
    match fmt {
        WeightFormat::Fixed(f) => {
            let step = 2f64.powi(-f.point);
            let in_range = w >= f.min_mantissa() as f64 * step && w <= f.max_mantissa() as f64 * step;
            if in_range && (v - w).abs() > step / 2.0 {
                bad.push(WEIGHT_PROPERTIES[1]);
            }
        }
        WeightFormat::Shift(p) => {
            let a = w.abs();
            if a >= p.smallest_magnitude() && a <= p.largest_magnitude() && (v - w).abs() / a > 1.0 / 3.0 {
                bad.push(WEIGHT_PROPERTIES[2]);
            }
        }
    }
    if fmt.bits() <= 8 && codeword_values(fmt).iter().any(|&d| (d - w).abs() < (v - w).abs()) {
        bad.push(WEIGHT_PROPERTIES[3]);
    }
    let (lo, hi) = if w <= w2 { (w, w2) } else { (w2, w) };
    if fmt.decode(fmt.quantize(lo)) > fmt.decode(fmt.quantize(hi)) {
        bad.push(WEIGHT_PROPERTIES[4]);
    }
    bad
}

/// The fused-affine error bound, or `None` when the parameters fall outside
/// the 8.8 range and the bound does not apply.
pub fn bn_fusion_holds(gamma: f64, beta: f64, mean: f64, sigma: f64, x: f64) -> Option<bool> {
    let range = 32767.0 / 256.0;
    let (scale, offset) = (gamma / sigma, beta - gamma * mean / sigma);
    if scale.abs() > range || offset.abs() > range || x.abs() > 8.0 {
        return None;
    }
    let bn = BnParams { gamma: vec![gamma], beta: vec![beta], mean: vec![mean], sigma: vec![sigma] };
    let fused = fuse_bn(&bn).unwrap()[0];
    let exact = gamma * (x - mean) / sigma + beta;
    Some((fused.apply(x) - exact).abs() <= 2f64.powi(-9) * x.abs() + 2f64.powi(-9) + 1e-12)
}

/// A format fitted to a log-uniform weight magnitude.
pub fn random_format(rng: &mut ChaCha8Rng) -> WeightFormat {
    let max_abs = 2f64.powf(rng.gen_range(-8.0..8.0));
    let q = if rng.gen_bool(0.5) {
        LayerQuant::new(Arithmetic::Shift, rng.gen_range(2..=8))
    } else {
        LayerQuant::new(Arithmetic::Fixed, rng.gen_range(2..=16))
    };
    WeightFormat::fit(q, &[max_abs, -max_abs * 0.5]).unwrap()
}

/// A weight near the format's range: mostly uniform, sometimes a codeword
/// or a midpoint between two codewords, sometimes tiny.
pub fn random_weight(rng: &mut ChaCha8Rng, fmt: &WeightFormat) -> f64 {
    let vals = codeword_values(fmt);
    let top = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    match rng.gen_range(0..10) {
        0 => vals[rng.gen_range(0..vals.len())],
        1 => {
            let (a, b) = (vals[rng.gen_range(0..vals.len())], vals[rng.gen_range(0..vals.len())]);
            (a + b) / 2.0
        }
        2 => rng.gen_range(-1.0..1.0) * top * 1e-3,
        _ => rng.gen_range(-1.25..1.25) * top,
    }
}

#[derive(Debug, Default)]
pub struct PropertyTally {
    pub name: &'static str,
    pub checked: usize,
    pub failures: Vec<String>,
}

/// Samples `samples` weights per property plus `samples` BN fusion cases.
pub fn quantizer_campaign(samples: usize, seed: u64) -> Vec<PropertyTally> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tallies: Vec<PropertyTally> =
        WEIGHT_PROPERTIES.iter().chain(&["bn fusion error"]).map(|&name| PropertyTally { name, ..Default::default() }).collect();
    let mut done = 0;
    while tallies.iter().take(5).any(|t| t.checked < samples) {
        let fmt = random_format(&mut rng);
        let (w, w2) = (random_weight(&mut rng, &fmt), random_weight(&mut rng, &fmt));
        let bad = weight_violations(&fmt, w, w2);
        for t in tallies.iter_mut().take(5) {
            let applies = match t.name {
                "fixed error bound" => matches!(fmt, WeightFormat::Fixed(_)),
                "shift relative error" => matches!(fmt, WeightFormat::Shift(_)),
                "nearest codeword" => fmt.bits() <= 8,
                _ => true,
            };
            if applies {
                t.checked += 1;
            }
            if bad.contains(&t.name) {
                t.failures.push(format!("{fmt:?} w={w:e} w2={w2:e}"));
            }
        }
        done += 1;
        assert!(done < samples * 100, "sampler starved");
    }
    let bn = &mut tallies[5];
    while bn.checked < samples {
        let (g, b, m, s, x) = (
            rng.gen_range(-4.0..4.0),
            rng.gen_range(-4.0..4.0),
            rng.gen_range(-4.0..4.0),
            rng.gen_range(0.05..4.0),
            rng.gen_range(-8.0..=8.0),
        );
        if let Some(ok) = bn_fusion_holds(g, b, m, s, x) {
            bn.checked += 1;
            if !ok {
                bn.failures.push(format!("gamma={g} beta={b} mean={m} sigma={s} x={x}"));
            }
        }
    }
    tallies
}

// ---------------------------------------------------------------------------
// Search fixtures

use flatstream::search::{SearchConfig, SearchTrace, Termination};

pub struct ToyProblem {
    pub net: NetworkSpec,
    pub params: ModelParams,
    pub train: Dataset,
    pub val: Dataset,
}

/// The two-layer toy net with labels from a random float teacher of the
/// same shape; the search starts from the teacher itself, so float accuracy
/// is 1 and every quantization step can only lose accuracy near the class
/// boundaries.
pub fn toy_problem(seed: u64) -> ToyProblem {
    use flatstream::engine::dataset;
    use flatstream::engine::train::init_params;
    let net = flatstream::model::zoo::toy_two_layer(2, 16, 3);
    let params = init_params(&net, seed);
    let data = dataset::teacher_labelled(&net, &params, 160, seed);
    let (train_set, val) = data.split(0.6);
    ToyProblem { net, params, train: train_set, val }
}

/// Structural checks on a search trace; returns the violations found.
pub fn trace_violations(trace: &SearchTrace, cfg: &SearchConfig, weighted_layers: usize) -> Vec<String> {
    let mut bad = Vec::new();
    let bound = flatstream::search::step_bound(weighted_layers, cfg);
    if trace.steps.len() > bound {
        bad.push(format!("{} steps exceed the bound {bound}", trace.steps.len()));
    }
    let mut current = trace.initial_cost;
    let mut retired = std::collections::BTreeSet::new();
    for s in &trace.steps {
        if s.cost_before != current {
            bad.push(format!("step {} starts from {} but the accepted cost is {current}", s.step, s.cost_before));
        }
        if s.cost_after >= s.cost_before {
            bad.push(format!("step {} does not reduce the cost", s.step));
        }
        if retired.contains(&s.layer) {
            bad.push(format!("step {} touches retired layer {}", s.step, s.layer));
        }
        if s.accepted != (s.alpha >= cfg.alpha_budget) {
            bad.push(format!("step {} decision disagrees with its accuracy", s.step));
        }
        if s.accepted {
            current = s.cost_after;
        } else {
            retired.insert(s.layer);
        }
    }
    let accepted: Vec<f64> = trace.accepted().map(|s| s.cost_after).collect();
    if accepted.windows(2).any(|w| w[1] > w[0]) {
        bad.push("accepted costs increase".into());
    }
    match trace.termination {
        Termination::LayersExhausted if retired.len() != weighted_layers => bad.push("exhausted with live layers".into()),
        Termination::BudgetReached if current > cfg.h_budget => bad.push("budget termination above the budget".into()),
        _ => {}
    }
    bad
}

// ---------------------------------------------------------------------------
// Planner fixtures

use flatstream::planner::{LayerUnroll, UnrollPlan};

/// MobileNet-V1 unroll rows at one pixel per cycle:
/// (label, stride, C, C', U, U', C/U, C'/U').
pub type UnrollRow = (&'static str, usize, usize, usize, usize, usize, usize, usize);

pub const MOBILENET_UNROLL: [UnrollRow; 21] = [
    ("Conv", 2, 3, 32, 3, 8, 1, 4),
    ("Conv dw", 1, 32, 32, 8, 8, 4, 4),
    ("Conv pw", 1, 32, 64, 8, 16, 4, 4),
    ("Conv dw", 2, 64, 64, 16, 4, 4, 16),
    ("Conv pw", 1, 64, 128, 4, 8, 16, 16),
    ("Conv dw", 1, 128, 128, 8, 8, 16, 16),
    ("Conv pw", 1, 128, 128, 8, 8, 16, 16),
    ("Conv dw", 2, 128, 128, 8, 2, 16, 64),
    ("Conv pw", 1, 128, 256, 2, 4, 64, 64),
    ("Conv dw", 1, 256, 256, 4, 4, 64, 64),
    ("Conv pw", 1, 256, 256, 4, 4, 64, 64),
    ("Conv dw", 2, 256, 256, 4, 1, 64, 256),
    ("Conv pw", 1, 256, 512, 1, 2, 256, 256),
    ("Conv dw", 1, 512, 512, 2, 2, 256, 256),
    ("Conv pw", 1, 512, 512, 2, 2, 256, 256),
    ("Conv dw", 2, 512, 512, 2, 1, 256, 512),
    ("Conv pw", 1, 512, 1024, 1, 1, 512, 1024),
    ("Conv dw", 1, 1024, 1024, 1, 1, 1024, 1024),
    ("Conv pw", 1, 1024, 1024, 1, 1, 1024, 1024),
    ("Avg Pool", 1, 1024, 1024, 1, 1, 1024, 1024),
    ("FC", 1, 1024, 1000, 1, 1, 1024, 1000),
];

/// Row-by-row differences between a plan and the reference table.
pub fn unroll_table_deviations(net: &NetworkSpec, plan: &UnrollPlan) -> Vec<String> {
    let mut bad = Vec::new();
    if net.layers.len() != MOBILENET_UNROLL.len() || plan.layers.len() != MOBILENET_UNROLL.len() {
        bad.push(format!("{} rows, expected {}", plan.layers.len(), MOBILENET_UNROLL.len()));
        return bad;
    }
    for (i, ((spec, u), row)) in net.layers.iter().zip(&plan.layers).zip(&MOBILENET_UNROLL).enumerate() {
        let got = (
            spec.kind.table_label(),
            spec.stride,
            spec.in_channels,
            spec.out_channels,
            u.u,
            u.u_out,
            spec.in_channels.div_ceil(u.u),
            spec.out_channels.div_ceil(u.u_out),
        );
        if got != *row {
            bad.push(format!("row {i}: got {got:?}, expected {row:?}"));
        }
    }
    bad
}

/// Token-level model of one core: `C` channel tokens arrive every `T_in`
/// cycles and `U` are consumed per cycle; outputs are produced likewise at
/// `U'` per cycle once a window completes. Returns the steady-state input
/// and output pixel rates and the peak input backlog.
pub struct TokenRun {
    pub pixels_in: u64,
    pub pixels_out: u64,
    pub cycles: u64,
    pub peak_backlog: u64,
}

pub fn token_simulate(spec: &LayerSpec, u: &LayerUnroll, periods: u64) -> TokenRun {
    let (c, co) = (spec.in_channels as u64, spec.out_channels as u64);
    let s2 = (spec.stride * spec.stride) as u64;
    let (mut backlog, mut peak, mut consumed) = (0u64, 0u64, 0u64);
    let (mut out_backlog, mut produced) = (0u64, 0u64);
    let mut pixels_in = 0;
    let cycles = periods * u.t_out;
    for t in 0..cycles {
        if t % u.t_in == 0 {
            backlog += c;
            pixels_in += 1;
        }
        peak = peak.max(backlog);
        let take = backlog.min(u.u as u64);
        backlog -= take;
        consumed += take;
        // every S² complete input pixels yield one output pixel
        if consumed >= c * s2 {
            consumed -= c * s2;
            out_backlog += co;
        }
        let emit = out_backlog.min(u.u_out as u64);
        out_backlog -= emit;
        produced += emit;
    }
    TokenRun { pixels_in, pixels_out: produced / co, cycles, peak_backlog: peak }
}

// ---------------------------------------------------------------------------
// Stream fixtures

/// A quantized model with random weights in 8-bit fixed point.
pub fn quantized(net: &NetworkSpec, seed: u64) -> QuantizedModel {
    let params = flatstream::engine::train::init_params(net, seed);
    QuantizedModel::quantize(net, &params, &QuantConfig::initial(net)).unwrap()
}

/// Deterministic test image for a network.
pub fn pattern_image(net: &NetworkSpec, seed: usize) -> Vec<u8> {
    (0..net.input_shape.len()).map(|i| ((i * 7 + seed * 13) % 200) as u8).collect()
}

/// Closed-form end-to-end cycle count for a chain of 1×1 stride-1 layers
/// whose channel counts are all multiples of the pixel interval `d`: the
/// input stream, one block pass plus two hand-offs per intermediate layer,
/// and the last layer's input and output passes plus its hand-off.
pub fn pointwise_chain_cycles(net: &NetworkSpec, plan: &UnrollPlan, images: u64) -> u64 {
    let d = plan.ipp.denominator;
    let pixels = net.input_shape.pixels() as u64 * images;
    let last = net.layers.len() - 1;
    let mut total = (pixels - 1) * d + 2;
    for (i, (spec, u)) in net.layers.iter().zip(&plan.layers).enumerate() {
        let b = spec.in_channels.div_ceil(u.u) as u64;
        if i < last {
            total += b + 2;
        } else {
            total += b + spec.out_channels.div_ceil(u.u_out) as u64;
        }
    }
    total
}

/// Cheapest configuration reachable from `q0` by single-layer moves that
/// keep the accumulator certificate, by breadth-first enumeration.
pub fn exhaustive_min(p: &ToyProblem, q0: &QuantConfig, cfg: &SearchConfig, cost: &flatstream::cost::CostModel) -> f64 {
    use flatstream::planner::{match_throughput, Ipp};
    use std::collections::{BTreeSet, HashSet, VecDeque};
    let plan = match_throughput(&p.net, Ipp::FULL);
    let all: BTreeSet<usize> = (0..p.net.layers.len()).filter(|&l| q0.get(l).is_some()).collect();
    let mut seen = HashSet::from([q0.clone()]);
    let mut queue = VecDeque::from([q0.clone()]);
    let mut best = f64::INFINITY;
    while let Some(q) = queue.pop_front() {
        best = best.min(cost.key(&p.net, &q, &plan));
        for n in flatstream::search::neighborhood(&q, &all, cfg.min_bits) {
            let ok = QuantizedModel::quantize(&p.net, &p.params, &n.config).and_then(|m| m.datapaths()).is_ok();
            if ok && seen.insert(n.config.clone()) {
                queue.push_back(n.config);
            }
        }
    }
    best
}

pub fn search_config(alpha: f64, h: f64, seed: u64) -> SearchConfig {
    SearchConfig { alpha_budget: alpha, h_budget: h, epochs: 1, learning_rate: 0.05, batch_size: 8, seed, ..Default::default() }
}

// ---------------------------------------------------------------------------
// Fine-tuning fixture

/// Quantized validation accuracy at E=0 and E=3 for the separable toy task:
/// the float net is trained first, then fine-tuned at 3-bit fixed point.
pub fn finetune_recovery(seed: u64) -> (f64, f64) {
    use flatstream::engine::dataset;
    use flatstream::engine::train::{finetune_ste, init_params, train, Precision, TrainOptions};
    use flatstream::quant::{Arithmetic, LayerQuant};
    let opts = |epochs| TrainOptions { epochs, learning_rate: 0.05, batch_size: 8, seed };
    let net = flatstream::model::zoo::tiny_separable();
    let q = QuantConfig::uniform(&net, LayerQuant::new(Arithmetic::Fixed, 3));
    let (tr, val) = dataset::prototypes(net.input_shape, 4, 256, seed).split(0.75);
    let float = train(&net, &init_params(&net, seed), Precision::Float, &tr, &opts(6)).unwrap();
    let (_, a0) = finetune_ste(&net, &float, &q, &tr, &val, &opts(0)).unwrap();
    let (_, a3) = finetune_ste(&net, &float, &q, &tr, &val, &opts(3)).unwrap();
    (a0.top1, a3.top1)
}

// ---------------------------------------------------------------------------
// Emitter fixtures

use flatstream::planner::Ipp;
use flatstream::rtl::{self, RtlArtifact};

/// Alternates shift and fixed layers so both MAC flavours are exercised.
pub fn emitter_config(net: &NetworkSpec) -> QuantConfig {
    use flatstream::quant::{Arithmetic, LayerQuant};
    let mut q = QuantConfig::initial(net);
    for (i, l) in q.layers.iter_mut().enumerate() {
        if let Some(lq) = l {
            let arith = if i % 2 == 0 { Arithmetic::Shift } else { Arithmetic::Fixed };
            *lq = LayerQuant::new(arith, 4 + (i % 4) as u8);
        }
    }
    q
}

pub fn emitter_model(net: &NetworkSpec) -> QuantizedModel {
    let params = flatstream::engine::train::init_params(net, 11);
    QuantizedModel::quantize(net, &params, &emitter_config(net)).unwrap()
}

/// Differences between freshly generated RTL and the checked-in golden tree
/// `tests/golden/<name>`; with `update` the tree is rewritten instead.
pub fn golden_mismatches(name: &str, net: &NetworkSpec, ipp: Ipp, update: bool) -> Vec<String> {
    let plan = flatstream::planner::match_throughput(net, ipp);
    let art = rtl::generate(&emitter_model(net), &plan).unwrap();
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let mut files = art.files.clone();
    files.push((rtl::MANIFEST_NAME.to_string(), art.manifest.to_text()));
    if update {
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        for (f, text) in &files {
            std::fs::write(dir.join(f), text).unwrap();
        }
        return Vec::new();
    }
    let mut bad = Vec::new();
    let mut on_disk: Vec<String> = match std::fs::read_dir(&dir) {
        Ok(rd) => rd.map(|e| e.unwrap().file_name().into_string().unwrap()).collect(),
        Err(e) => return vec![format!("{name}: {e}")],
    };
    on_disk.sort();
    let mut expected: Vec<String> = files.iter().map(|f| f.0.clone()).collect();
    expected.sort();
    if on_disk != expected {
        bad.push(format!("{name}: file set {on_disk:?} != {expected:?}"));
    }
    for (f, text) in &files {
        if std::fs::read_to_string(dir.join(f)).ok().as_deref() != Some(text.as_str()) {
            bad.push(format!("{name}/{f} differs from golden"));
        }
    }
    bad
}

/// Manifest port widths that disagree with the widths implied by the plan.
pub fn port_width_mismatches(model: &QuantizedModel, plan: &UnrollPlan, art: &RtlArtifact) -> Vec<String> {
    let net = &model.net;
    let mut bad = Vec::new();
    for ((l, spec), u) in art.manifest.layers.iter().zip(&net.layers).zip(&plan.layers) {
        let lane = if net.is_logit_layer(l.index) { 32 } else { 8 };
        let bits = model.layers[l.index].weights.as_ref().map_or(0, |w| w.format.bits() as usize);
        let k2 = spec.kernel * spec.kernel;
        let weight_bus = match spec.kind {
            LayerKind::AvgPool => 0,
            LayerKind::DepthwiseConv => u.u * k2 * bits,
            _ => u.u * spec.out_channels * k2 * bits,
        };
        let expect = (u.u * 8, u.u_out * lane, weight_bus);
        let got = (l.act_in_width, l.out_width, l.weight_bus_width);
        if got != expect {
            bad.push(format!("layer {}: (in, out, weights) {got:?} != {expect:?}", l.index));
        }
        // consecutive cores must agree on the stream width between them
        if let Some(next) = art.manifest.layers.get(l.index + 1) {
            if next.act_in_width != l.out_width {
                bad.push(format!("layer {}: output width {} feeds input width {}", l.index, l.out_width, next.act_in_width));
            }
        }
    }
    bad
}

/// Layers whose weight hex file does not decode to the checkpoint codewords.
pub fn hex_mismatches(model: &QuantizedModel, art: &RtlArtifact) -> Vec<String> {
    use flatstream::model::checkpoint;
    let decoded = checkpoint::decode(&checkpoint::encode(model).unwrap()).unwrap();
    let mut bad = Vec::new();
    for (i, layer) in decoded.layers.iter().enumerate() {
        let Some(w) = &layer.weights else { continue };
        let hex = art.files.iter().find(|f| f.0 == format!("weights_{i}.hex"));
        match hex.map(|h| rtl::parse_weight_hex(&h.1)) {
            Some(Ok(codes)) if codes == w.codes => {}
            _ => bad.push(format!("weights_{i}.hex")),
        }
    }
    bad
}
