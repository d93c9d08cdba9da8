//! `flatstream`: plan, quantize, search, estimate, simulate, emit and
//! partition streaming CNN accelerators.

mod commands;
mod error;
mod manifest;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flatstream::planner::Ipp;
use serde::Serialize;

use error::{CliError, ErrorClass};
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "flatstream", version, about = "Hybrid-quantization streaming CNN accelerator generator")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Serialize)]
#[command(next_help_heading = "Global options")]
struct GlobalOpts {
    /// Seed for every random choice: synthesis, initialization, shuffling
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Maximum worker threads [default: all cores]
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Print machine-readable JSON on stdout instead of tables
    #[arg(long, global = true)]
    json: bool,
    /// Where to write the run manifest
    #[arg(long, global = true, value_name = "PATH", default_value = "flatstream-run.json")]
    manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithArg {
    Shift,
    Fixed,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Random images labelled by the float network itself
    Teacher,
    /// Noisy class prototypes, separable by a small network
    Prototypes,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Synthesize weights and a labelled train/validation split for a model
    Synth(SynthArgs),
    /// Quantize float weights into a checkpoint
    Quantize(QuantizeArgs),
    /// Greedy hybrid-quantization search, then write the final checkpoint
    Search(SearchArgs),
    /// Derive the throughput-matched unroll plan
    Plan(PlanArgs),
    /// Estimate per-layer resources and latency
    Estimate(EstimateArgs),
    /// Cycle-accurate simulation of the streaming pipeline
    Simulate(SimulateArgs),
    /// Generate SystemVerilog, weight memories and a manifest
    Emit(EmitArgs),
    /// Split the pipeline across devices under per-device budgets
    Partition(PartitionArgs),
    /// Top-1/top-5 accuracy of a checkpoint on a labelled set
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Model descriptor
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for weights.bin, train.fsds and val.fsds
    #[arg(long)]
    pub out: PathBuf,
    /// How samples are generated and labelled
    #[arg(long, value_enum, default_value_t = Task::Teacher)]
    pub task: Task,
    /// Labelled samples before the split
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    /// Fraction of samples used for training
    #[arg(long, default_value_t = 0.75)]
    pub train_frac: f64,
    /// Float training epochs on the training split
    #[arg(long, default_value_t = 0)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct QuantizeArgs {
    /// Model descriptor
    #[arg(long)]
    pub model: PathBuf,
    /// Float weight blob
    #[arg(long)]
    pub weights: PathBuf,
    /// Uniform arithmetic for every weighted layer [default: descriptor, else fixed]
    #[arg(long, value_enum)]
    pub arith: Option<ArithArg>,
    /// Uniform weight width [default: descriptor, else 8]
    #[arg(long)]
    pub bits: Option<u8>,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    /// Model descriptor; its quantization fragment, if any, is the start point
    #[arg(long)]
    pub model: PathBuf,
    /// Float weight blob
    #[arg(long)]
    pub weights: PathBuf,
    /// Training set for fine-tuning
    #[arg(long)]
    pub train: PathBuf,
    /// Validation set for accuracy checks
    #[arg(long)]
    pub val: PathBuf,
    /// Accuracy budget as a fraction of the float baseline
    #[arg(long, default_value_t = 0.95)]
    pub alpha_frac: f64,
    /// Stop once the cost key is at or below this value (0: always minimize)
    #[arg(long, default_value_t = 0.0)]
    pub h_budget: f64,
    /// Fine-tuning epochs per candidate
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    /// Extra fine-tuning epochs on the final configuration
    #[arg(long, default_value_t = 0)]
    pub final_epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Input pixel rate used for cost estimates, `1` or `1/D`
    #[arg(long, default_value = "1")]
    pub ipp: Ipp,
    /// Cost coefficient table (TOML)
    #[arg(long)]
    pub coeff: Option<PathBuf>,
    /// Write the search trace here
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PlanArgs {
    /// Model descriptor
    #[arg(long)]
    pub model: PathBuf,
    /// Input pixel rate, `1` or `1/D`
    #[arg(long, default_value = "1")]
    pub ipp: Ipp,
    /// Also write the plan table here
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EstimateArgs {
    /// Model descriptor (quantization from its fragment, else 8-bit fixed)
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    pub model: Option<PathBuf>,
    /// Quantized checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Input pixel rate, `1` or `1/D`
    #[arg(long, default_value = "1")]
    pub ipp: Ipp,
    /// Cost coefficient table (TOML)
    #[arg(long)]
    pub coeff: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Quantized checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Plan table written by `plan` [default: derived from --ipp]
    #[arg(long, conflicts_with = "ipp")]
    pub plan: Option<PathBuf>,
    /// Input pixel rate, `1` or `1/D`
    #[arg(long)]
    pub ipp: Option<Ipp>,
    /// Image set; labels are ignored
    #[arg(long)]
    pub images: PathBuf,
    /// Simulate only the first N images
    #[arg(long)]
    pub count: Option<usize>,
    /// Fail unless every output stream equals the golden engine's
    #[arg(long)]
    pub assert_bitexact: bool,
    /// Clock used to convert cycles into frames per second
    #[arg(long, default_value_t = 156.0)]
    pub clock_mhz: f64,
    /// Extra link latency in front of a layer, `LAYER:CYCLES` (repeatable)
    #[arg(long, value_name = "LAYER:CYCLES")]
    pub link_delay: Vec<String>,
    /// Write a per-cycle activity trace (CSV) here
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EmitArgs {
    /// Quantized checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Plan table written by `plan` [default: derived from --ipp]
    #[arg(long, conflicts_with = "ipp")]
    pub plan: Option<PathBuf>,
    /// Input pixel rate, `1` or `1/D`
    #[arg(long)]
    pub ipp: Option<Ipp>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PartitionArgs {
    /// Model descriptor (quantization from its fragment, else 8-bit fixed)
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    pub model: Option<PathBuf>,
    /// Quantized checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Input pixel rate, `1` or `1/D`
    #[arg(long, default_value = "1")]
    pub ipp: Ipp,
    /// Cost coefficient table (TOML)
    #[arg(long)]
    pub coeff: Option<PathBuf>,
    /// Budget of one device, e.g. `luts=400000,bram=30000000` (repeat per device)
    #[arg(long, required = true, value_name = "KEY=N,...")]
    pub budget: Vec<String>,
    /// One-way latency of a device link in milliseconds
    #[arg(long, default_value_t = 0.0013)]
    pub link_ms: f64,
    /// Clock used to convert the link latency into cycles
    #[arg(long, default_value_t = 156.0)]
    pub clock_mhz: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Quantized checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled set
    #[arg(long)]
    pub data: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Quantize(_) => "quantize",
            Command::Search(_) => "search",
            Command::Plan(_) => "plan",
            Command::Estimate(_) => "estimate",
            Command::Simulate(_) => "simulate",
            Command::Emit(_) => "emit",
            Command::Partition(_) => "partition",
            Command::Eval(_) => "eval",
        }
    }

    /// Files the command reads, for the run manifest.
    fn inputs(&self) -> Vec<PathBuf> {
        let opt = |p: &Option<PathBuf>| p.iter().cloned().collect::<Vec<_>>();
        match self {
            Command::Synth(a) => vec![a.model.clone()],
            Command::Quantize(a) => vec![a.model.clone(), a.weights.clone()],
            Command::Search(a) => {
                [vec![a.model.clone(), a.weights.clone(), a.train.clone(), a.val.clone()], opt(&a.coeff)].concat()
            }
            Command::Plan(a) => vec![a.model.clone()],
            Command::Estimate(a) => [opt(&a.model), opt(&a.checkpoint), opt(&a.coeff)].concat(),
            Command::Simulate(a) => [vec![a.checkpoint.clone(), a.images.clone()], opt(&a.plan)].concat(),
            Command::Emit(a) => [vec![a.checkpoint.clone()], opt(&a.plan)].concat(),
            Command::Partition(a) => [opt(&a.model), opt(&a.checkpoint), opt(&a.coeff)].concat(),
            Command::Eval(a) => vec![a.checkpoint.clone(), a.data.clone()],
        }
    }

    fn run(&self, seed: u64) -> Result<commands::Report, CliError> {
        match self {
            Command::Synth(a) => commands::synth(a, seed),
            Command::Quantize(a) => commands::quantize(a),
            Command::Search(a) => commands::search(a, seed),
            Command::Plan(a) => commands::plan(a),
            Command::Estimate(a) => commands::estimate(a),
            Command::Simulate(a) => commands::simulate(a),
            Command::Emit(a) => commands::emit(a),
            Command::Partition(a) => commands::partition(a),
            Command::Eval(a) => commands::eval(a),
        }
    }
}

fn fail(err: &CliError, json: bool) -> u8 {
    let class = err.class();
    if json {
        let v = serde_json::json!({ "error": class.name(), "message": err.to_string(), "exit_code": class.exit_code() });
        println!("{v}");
    } else {
        eprintln!("error[{}]: {err}", class.name());
    }
    class.exit_code()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ErrorClass::Usage.exit_code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let g = &cli.global;
    if let Some(jobs) = g.jobs {
        if jobs == 0 {
            return ExitCode::from(fail(&CliError::Usage("--jobs must be at least 1".into()), g.json));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().expect("thread pool is built once");
    }

    let options = serde_json::to_value(&cli.command).expect("options serialize");
    let mut manifest = RunManifest::new(cli.command.name(), g.seed, g.jobs, options);
    let existing: Vec<PathBuf> = cli.command.inputs().into_iter().filter(|p| p.exists()).collect();

    let mut code = 0;
    match cli.command.run(g.seed) {
        Ok(report) => {
            let mut out = std::io::stdout().lock();
            let _ = if g.json { writeln!(out, "{}", report.json) } else { write!(out, "{}", report.text) };
            match RunManifest::record(&report.outputs) {
                Ok(d) => manifest.outputs = d,
                Err(e) => code = fail(&e, g.json),
            }
            if let Some(err) = report.failure {
                code = fail(&err, g.json);
            }
        }
        Err(e) => code = fail(&e, g.json),
    }
    match RunManifest::record(&existing) {
        Ok(d) => manifest.inputs = d,
        Err(e) => code = code.max(fail(&e, g.json)),
    }
    if let Err(e) = manifest.write(&g.manifest) {
        code = code.max(fail(&e, g.json));
    }
    ExitCode::from(code)
}
