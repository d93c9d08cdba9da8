//! Subcommand bodies. Each returns a human table, a JSON value and the
//! files it wrote.

use std::path::{Path, PathBuf};

use flatstream::cost::{layer_costs, CostCoefficients, CostModel, CostReport};
use flatstream::engine::train::{evaluate_float, finetune_ste, init_params, train, Precision, TrainOptions};
use flatstream::engine::{dataset, evaluate, forward_quant, Dataset, EngineError, QuantizedModel};
use flatstream::model::descriptor::{self, Descriptor};
use flatstream::model::{checkpoint, read_weight_blob, write_weight_blob, NetworkSpec};
use flatstream::planner::partition::{link_latency_cycles, partition as split_pipeline};
use flatstream::planner::{match_throughput, Ipp, UnrollPlan};
use flatstream::quant::{Arithmetic, LayerQuant, QuantConfig, WeightFormat};
use flatstream::rtl;
use flatstream::search::{search as run_search, SearchConfig};
use flatstream::sim::{measure_utilization, simulate as run_sim, SimOptions};
use rayon::prelude::*;
use serde_json::json;

use crate::error::CliError;
use crate::{
    ArithArg, EmitArgs, EstimateArgs, EvalArgs, PartitionArgs, PlanArgs, QuantizeArgs, SearchArgs, SimulateArgs,
    SynthArgs, Task,
};

pub struct Report {
    pub text: String,
    pub json: serde_json::Value,
    pub outputs: Vec<PathBuf>,
    /// Set when the run completed but a requested check failed.
    pub failure: Option<CliError>,
}

impl Report {
    fn new(text: String, json: serde_json::Value, outputs: Vec<PathBuf>) -> Self {
        Self { text, json, outputs, failure: None }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn ensure_writable(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::OutputExists(path.display().to_string()));
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_descriptor(path: &Path) -> Result<Descriptor, CliError> {
    Ok(descriptor::parse(&read_text(path)?)?)
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::from_bytes(&read_bytes(path)?)?)
}

fn read_coeff(path: Option<&PathBuf>) -> Result<CostCoefficients, CliError> {
    match path {
        None => Ok(CostCoefficients::default()),
        Some(p) => Ok(CostCoefficients::from_toml(&read_text(p)?)?),
    }
}

/// Network and quantization from a checkpoint, or from a descriptor's
/// fragment falling back to 8-bit fixed point.
fn network_and_config(model: Option<&PathBuf>, ckpt: Option<&PathBuf>) -> Result<(NetworkSpec, QuantConfig), CliError> {
    match (model, ckpt) {
        (_, Some(c)) => {
            let m = checkpoint::decode(&read_bytes(c)?)?;
            Ok((m.net, m.config))
        }
        (Some(d), None) => {
            let desc = read_descriptor(d)?;
            let q = desc.quant.unwrap_or_else(|| QuantConfig::initial(&desc.network));
            Ok((desc.network, q))
        }
        (None, None) => Err(CliError::Usage("one of --model or --checkpoint is required".into())),
    }
}

fn resolve_plan(net: &NetworkSpec, plan: Option<&PathBuf>, ipp: Option<Ipp>) -> Result<UnrollPlan, CliError> {
    match plan {
        Some(p) => {
            let plan = UnrollPlan::parse_table(&read_text(p)?)?;
            plan.check(net)?;
            Ok(plan)
        }
        None => Ok(match_throughput(net, ipp.unwrap_or(Ipp::FULL))),
    }
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("{}\n", parts.join("  ").trim_end())
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

fn layer_label(net: &NetworkSpec, i: usize) -> String {
    let l = &net.layers[i];
    format!("{} {}x{}/s{}", l.kind.tag(), l.kernel, l.kernel, l.stride)
}

fn quant_label(q: Option<LayerQuant>) -> String {
    q.map_or_else(|| "-".to_string(), |q| q.to_string())
}

pub fn synth(a: &SynthArgs, seed: u64) -> Result<Report, CliError> {
    if !(a.train_frac > 0.0 && a.train_frac < 1.0) {
        return Err(CliError::Usage(format!("--train-frac {} must lie strictly between 0 and 1", a.train_frac)));
    }
    let net = read_descriptor(&a.model)?.network;
    let paths = [a.out.join("weights.bin"), a.out.join("train.fsds"), a.out.join("val.fsds")];
    for p in &paths {
        ensure_writable(p, a.force)?;
    }
    let mut params = init_params(&net, seed);
    let data = match a.task {
        Task::Teacher => dataset::teacher_labelled(&net, &params, a.samples, seed),
        Task::Prototypes => dataset::prototypes(net.input_shape, net.class_count, a.samples, seed),
    };
    let (train_set, val) = data.split(1.0 - a.train_frac);
    if train_set.is_empty() || val.is_empty() {
        return Err(CliError::Usage(format!("{} samples leave an empty split", a.samples)));
    }
    if a.epochs > 0 {
        let opts = TrainOptions { epochs: a.epochs, learning_rate: a.lr, batch_size: a.batch_size, seed };
        params = train(&net, &params, Precision::Float, &train_set, &opts)?;
    }
    let acc = evaluate_float(&net, &params, Precision::Float, &val)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    write(&paths[0], &write_weight_blob(&net, &params)?)?;
    write(&paths[1], &train_set.to_bytes())?;
    write(&paths[2], &val.to_bytes())?;
    let text = format!(
        "network      {}\nparameters   {}\ntrain        {} samples\nvalidation   {} samples\nfloat top-1  {:.4}\n",
        net.name,
        net.param_count(),
        train_set.len(),
        val.len(),
        acc.top1
    );
    let j = json!({
        "network": net.name,
        "parameters": net.param_count(),
        "train_samples": train_set.len(),
        "val_samples": val.len(),
        "float_accuracy": acc,
        "files": paths,
    });
    Ok(Report::new(text, j, paths.to_vec()))
}

fn quantized_summary(model: &QuantizedModel) -> Vec<Vec<String>> {
    model
        .net
        .layers
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let format = match model.layers[i].weights.as_ref().map(|w| w.format) {
                Some(WeightFormat::Fixed(f)) => format!("point {}", f.point),
                Some(WeightFormat::Shift(p)) => format!("bias {}", p.bias),
                None => "-".to_string(),
            };
            vec![i.to_string(), layer_label(&model.net, i), quant_label(model.config.get(i)), format]
        })
        .collect()
}

pub fn quantize(a: &QuantizeArgs) -> Result<Report, CliError> {
    ensure_writable(&a.out, a.force)?;
    let desc = read_descriptor(&a.model)?;
    let net = &desc.network;
    let params = read_weight_blob(net, &read_bytes(&a.weights)?)?;
    let config = match (a.arith, a.bits) {
        (None, None) => desc.quant.clone().unwrap_or_else(|| QuantConfig::initial(net)),
        (arith, bits) => {
            let arith = match arith.unwrap_or(ArithArg::Fixed) {
                ArithArg::Shift => Arithmetic::Shift,
                ArithArg::Fixed => Arithmetic::Fixed,
            };
            QuantConfig::uniform(net, LayerQuant::new(arith, bits.unwrap_or(8)))
        }
    };
    let model = QuantizedModel::quantize(net, &params, &config)?;
    model.datapaths()?;
    let bytes = checkpoint::encode(&model)?;
    write(&a.out, &bytes)?;
    let rows = quantized_summary(&model);
    let text = table(&["layer", "type", "quant", "scale"], &rows)
        + &format!("wrote {} ({} bytes)\n", a.out.display(), bytes.len());
    let j = json!({ "network": net.name, "config": config, "checkpoint": a.out, "bytes": bytes.len() });
    Ok(Report::new(text, j, vec![a.out.clone()]))
}

pub fn search(a: &SearchArgs, seed: u64) -> Result<Report, CliError> {
    if !(0.0..=1.0).contains(&a.alpha_frac) {
        return Err(CliError::Usage(format!("--alpha-frac {} must lie in [0, 1]", a.alpha_frac)));
    }
    ensure_writable(&a.out, a.force)?;
    if let Some(t) = &a.trace {
        ensure_writable(t, a.force)?;
    }
    let desc = read_descriptor(&a.model)?;
    let net = &desc.network;
    let params = read_weight_blob(net, &read_bytes(&a.weights)?)?;
    let (train_set, val) = (read_dataset(&a.train)?, read_dataset(&a.val)?);
    let q0 = desc.quant.clone().unwrap_or_else(|| QuantConfig::initial(net));
    let baseline = evaluate_float(net, &params, Precision::Float, &val)?.top1;
    let cfg = SearchConfig {
        alpha_budget: a.alpha_frac * baseline,
        h_budget: a.h_budget,
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        seed,
        ..Default::default()
    };
    let plan = match_throughput(net, a.ipp);
    let cost = CostModel::new(read_coeff(a.coeff.as_ref())?);
    let out = run_search(net, &params, &q0, &cfg, &plan, &cost, &train_set, &val)?;
    let mut theta = out.params.clone();
    if a.final_epochs > 0 {
        let opts = TrainOptions { epochs: a.final_epochs, learning_rate: a.lr, batch_size: a.batch_size, seed };
        theta = finetune_ste(net, &theta, &out.config, &train_set, &val, &opts)?.0;
    }
    let model = QuantizedModel::quantize(net, &theta, &out.config)?;
    model.datapaths()?;
    let acc = evaluate(&model, &val)?;
    write(&a.out, &checkpoint::encode(&model)?)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(t) = &a.trace {
        write(t, out.trace.to_text().as_bytes())?;
        outputs.push(t.clone());
    }
    let final_cost = cost.key(net, &out.config, &plan);
    let accepted = out.trace.accepted().count();
    let text = format!(
        "float baseline   {baseline:.4}\naccuracy budget  {:.4} ({} x baseline)\ninitial cost     {:.2}\nfinal cost       {final_cost:.2}\n\
         steps            {} ({accepted} accepted)\ntermination      {:?}\nconfiguration    {}\nquantized top-1  {:.4}\n",
        cfg.alpha_budget,
        a.alpha_frac,
        out.trace.initial_cost,
        out.trace.steps.len(),
        out.trace.termination,
        out.config,
        acc.top1
    );
    let j = json!({
        "baseline_accuracy": baseline,
        "alpha_budget": cfg.alpha_budget,
        "initial_cost": out.trace.initial_cost,
        "final_cost": final_cost,
        "steps": out.trace.steps.len(),
        "accepted": accepted,
        "termination": out.trace.termination,
        "config": out.config,
        "accuracy": acc,
        "checkpoint": a.out,
    });
    Ok(Report::new(text, j, outputs))
}

pub fn plan(a: &PlanArgs) -> Result<Report, CliError> {
    if let Some(o) = &a.out {
        ensure_writable(o, a.force)?;
    }
    let net = read_descriptor(&a.model)?.network;
    let plan = match_throughput(&net, a.ipp);
    let text = plan.render_table(&net);
    let mut outputs = Vec::new();
    if let Some(o) = &a.out {
        write(o, text.as_bytes())?;
        outputs.push(o.clone());
    }
    let rows: Vec<_> = net
        .layers
        .iter()
        .zip(&plan.layers)
        .map(|(s, l)| {
            json!({
                "kind": s.kind.tag(), "stride": s.stride, "in_channels": s.in_channels, "out_channels": s.out_channels,
                "u": l.u, "u_out": l.u_out, "input_phases": l.input_phases(s), "output_phases": l.output_phases(s),
                "t_in": l.t_in, "t_out": l.t_out,
            })
        })
        .collect();
    Ok(Report::new(text, json!({ "ipp": plan.ipp.to_string(), "layers": rows }), outputs))
}

pub fn estimate(a: &EstimateArgs) -> Result<Report, CliError> {
    let (net, q) = network_and_config(a.model.as_ref(), a.checkpoint.as_ref())?;
    let coeff = read_coeff(a.coeff.as_ref())?;
    let plan = match_throughput(&net, a.ipp);
    let costs = layer_costs(&net, &q, &plan, &coeff);
    let total: CostReport = costs.iter().copied().sum();
    let row = |label: String, quant: String, c: &CostReport| {
        vec![
            label,
            quant,
            c.luts.to_string(),
            c.registers.to_string(),
            c.bram_bits.to_string(),
            c.dsps.to_string(),
            c.latency_cycles.to_string(),
        ]
    };
    let mut rows: Vec<Vec<String>> =
        costs.iter().enumerate().map(|(i, c)| row(format!("{i} {}", layer_label(&net, i)), quant_label(q.get(i)), c)).collect();
    rows.push(row("total".into(), String::new(), &total));
    let key = total.key(&coeff.key);
    let text = table(&["layer", "quant", "luts", "registers", "bram_bits", "dsps", "latency"], &rows)
        + &format!("cost key {key:.2}\n");
    Ok(Report::new(text, json!({ "ipp": a.ipp.to_string(), "layers": costs, "total": total, "key": key }), vec![]))
}

fn parse_link_delay(s: &str) -> Result<(usize, u64), CliError> {
    let bad = || CliError::Usage(format!("--link-delay {s:?}: expected LAYER:CYCLES"));
    let (l, c) = s.split_once(':').ok_or_else(bad)?;
    Ok((l.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

pub fn simulate(a: &SimulateArgs) -> Result<Report, CliError> {
    if let Some(t) = &a.trace {
        ensure_writable(t, a.force)?;
    }
    let model = checkpoint::decode(&read_bytes(&a.checkpoint)?)?;
    let plan = resolve_plan(&model.net, a.plan.as_ref(), a.ipp)?;
    let data = read_dataset(&a.images)?;
    if data.shape() != model.net.input_shape {
        return Err(EngineError::ShapeMismatch(format!(
            "images are {}, network expects {}",
            data.shape(),
            model.net.input_shape
        ))
        .into());
    }
    let take = a.count.unwrap_or(data.len()).min(data.len());
    let images: Vec<Vec<u8>> = data.samples.into_iter().take(take).map(|s| s.image).collect();
    let link_delays = a.link_delay.iter().map(|s| parse_link_delay(s)).collect::<Result<Vec<_>, _>>()?;
    let opts = SimOptions { link_delays, trace: a.trace.is_some() };
    let r = run_sim(&model, &plan, &images, &opts)?;
    let u = measure_utilization(&r);

    let mut mismatched = Vec::new();
    if a.assert_bitexact {
        let golden: Vec<Vec<i64>> = images
            .par_iter()
            .map(|img| forward_quant(&model, img).map(|f| f.output_stream()))
            .collect::<Result<_, _>>()?;
        mismatched = golden.iter().zip(&r.outputs).enumerate().filter(|(_, (g, s))| g != s).map(|(i, _)| i).collect();
    }
    let mut outputs = Vec::new();
    if let (Some(t), Some(trace)) = (&a.trace, &r.trace) {
        write(t, trace.as_bytes())?;
        outputs.push(t.clone());
    }

    let fps = r.frames_per_second(a.clock_mhz);
    let mut text = format!(
        "images            {}\ninput period      {} cycles\ninput consumed    {} cycles\ntotal             {} cycles\n\
         stalls            {} (input {}, backpressure {})\nthroughput        {fps:.2} fps at {} MHz\n\
         utilization       gross {:.4}, steady state {:.4}\n",
        r.images,
        r.input_period,
        r.cycles_input_consume,
        r.cycles_total,
        r.stall_count,
        r.input_stalls,
        r.backpressure_stalls,
        a.clock_mhz,
        u.gross,
        u.steady_state
    );
    if a.assert_bitexact {
        text += &format!("bit-exact         {}\n", if mismatched.is_empty() { "yes".to_string() } else { format!("no, images {mismatched:?}") });
    }
    let rows: Vec<Vec<String>> = r
        .layers
        .iter()
        .zip(&u.layers)
        .enumerate()
        .map(|(i, (s, lu))| {
            vec![
                i.to_string(),
                layer_label(&model.net, i),
                s.units.to_string(),
                s.compute_cycles.to_string(),
                s.active_unit_cycles.to_string(),
                format!("{:.4}", lu.utilization),
            ]
        })
        .collect();
    text += &table(&["layer", "type", "units", "busy_cycles", "active_unit_cycles", "utilization"], &rows);
    let j = json!({
        "images": r.images,
        "input_period": r.input_period,
        "cycles_input_consume": r.cycles_input_consume,
        "cycles_total": r.cycles_total,
        "stall_count": r.stall_count,
        "input_stalls": r.input_stalls,
        "backpressure_stalls": r.backpressure_stalls,
        "fps": fps,
        "clock_mhz": a.clock_mhz,
        "utilization": u,
        "layers": r.layers,
        "bitexact": a.assert_bitexact.then_some(mismatched.is_empty()),
    });
    let mut report = Report::new(text, j, outputs);
    if !mismatched.is_empty() {
        report.failure =
            Some(CliError::Verification(format!("{} of {} output streams differ from the golden engine", mismatched.len(), r.images)));
    }
    Ok(report)
}

pub fn emit(a: &EmitArgs) -> Result<Report, CliError> {
    let model = checkpoint::decode(&read_bytes(&a.checkpoint)?)?;
    let plan = resolve_plan(&model.net, a.plan.as_ref(), a.ipp)?;
    let art = rtl::emit(&model, &plan, &a.out, a.force)?;
    let rows: Vec<Vec<String>> = art
        .manifest
        .layers
        .iter()
        .map(|l| {
            vec![
                l.index.to_string(),
                l.module.clone(),
                l.quant.clone(),
                l.act_in_width.to_string(),
                l.out_width.to_string(),
                l.weight_bus_width.to_string(),
            ]
        })
        .collect();
    let text = table(&["layer", "module", "quant", "in_bits", "out_bits", "weight_bits"], &rows)
        + &format!("wrote {} files to {}\n", art.files.len() + 1, a.out.display());
    let files: Vec<&str> = art.files.iter().map(|f| f.0.as_str()).chain([rtl::MANIFEST_NAME]).collect();
    let j = json!({ "out": a.out, "top": art.manifest.top, "files": files });
    Ok(Report::new(text, j, vec![a.out.clone()]))
}

fn parse_budget(s: &str) -> Result<CostReport, CliError> {
    let bad = |m: String| CliError::Usage(format!("--budget {s:?}: {m}"));
    let mut b = CostReport::UNLIMITED;
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| bad("expected KEY=N".into()))?;
        let v: u64 = v.trim().parse().map_err(|_| bad(format!("{v:?} is not a count")))?;
        match k.trim() {
            "luts" => b.luts = v,
            "regs" | "registers" => b.registers = v,
            "bram" | "bram_bits" => b.bram_bits = v,
            "dsps" => b.dsps = v,
            other => return Err(bad(format!("unknown resource {other:?}"))),
        }
    }
    Ok(b)
}

pub fn partition(a: &PartitionArgs) -> Result<Report, CliError> {
    let (net, q) = network_and_config(a.model.as_ref(), a.checkpoint.as_ref())?;
    let budgets = a.budget.iter().map(|s| parse_budget(s)).collect::<Result<Vec<_>, _>>()?;
    let plan = match_throughput(&net, a.ipp);
    let costs = layer_costs(&net, &q, &plan, &read_coeff(a.coeff.as_ref())?);
    let link = link_latency_cycles(a.link_ms, a.clock_mhz);
    let p = split_pipeline(&net, &plan, &costs, &budgets, link)?;
    let rows: Vec<Vec<String>> = p
        .devices
        .iter()
        .enumerate()
        .map(|(i, d)| {
            vec![
                i.to_string(),
                format!("{}..{}", d.layers.start, d.layers.end),
                d.cost.luts.to_string(),
                d.cost.registers.to_string(),
                d.cost.bram_bits.to_string(),
                d.cost.dsps.to_string(),
            ]
        })
        .collect();
    let text = table(&["device", "layers", "luts", "registers", "bram_bits", "dsps"], &rows)
        + &format!(
            "cuts before layers {:?}\nlink latency {link} cycles ({} ms at {} MHz)\nadded latency {} cycles; throughput unchanged\n",
            p.cuts,
            a.link_ms,
            a.clock_mhz,
            p.added_latency()
        );
    let j = json!({ "plan": p, "added_latency": p.added_latency() });
    Ok(Report::new(text, j, vec![]))
}

pub fn eval(a: &EvalArgs) -> Result<Report, CliError> {
    let model = checkpoint::decode(&read_bytes(&a.checkpoint)?)?;
    let data = read_dataset(&a.data)?;
    let r = evaluate(&model, &data)?;
    let text = format!("samples  {}\ntop-1    {:.4}\ntop-5    {:.4}\n", r.sample_count, r.top1, r.top5);
    Ok(Report::new(text, json!(r), vec![]))
}
