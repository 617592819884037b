#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use fastcache::approx::ApproximatorSet;
use fastcache::bench::{self, BenchSpec, Method, Modules};
use fastcache::engine::{self, SkipMode};
use fastcache::interp::harsanyi::write_heatmap_csv;
use fastcache::interp::{self, ProbeFunction, BRUTE_FORCE_CAP};
use fastcache::model::ToyModel;
use fastcache::schedule::{make_schedule, Schedule, ScheduleKind};
use fastcache::trace::{self, Trace, TraceError};
use fastcache::verify::{self, Suite, VerifyOptions};

const EXIT_FLAGS: u8 = 2;
const EXIT_INVARIANT: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "fastcache", version, about = "Trace generation, calibration, cached inference benchmarks and self-checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the toy model at full compute over a schedule and record a trace.
    GenTrace(GenTraceArgs),
    /// Fit per-layer linear approximators and the static bypass from a trace.
    Calibrate(CalibrateArgs),
    /// Compare full compute, fixed-interval skipping and the cached engine.
    Bench(BenchArgs),
    /// Run the invariant suites.
    Verify(VerifyArgs),
    /// Per-token interaction heatmap over a trace.
    Interp(InterpArgs),
}

#[derive(Args)]
struct GenTraceArgs {
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value = "static")]
    schedule: ScheduleKind,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Record only model inputs, without per-layer (input, output) pairs.
    #[arg(long)]
    no_layer_pairs: bool,
    /// Also write the model weights to this file.
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    #[arg(long)]
    out: PathBuf,
    /// Write the per-layer held-out error table as CSV.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Approximators from `calibrate`; fitted from the trace when omitted.
    #[arg(long)]
    approximators: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    tau_s: f64,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value = "linear")]
    skip_mode: SkipMode,
    /// Enabled modules: `STR,SC,MB`, `none`, `grid`, or `;`-separated lists.
    #[arg(long, default_value = "STR,SC,MB")]
    ablate: String,
    /// Interval of the fixed-skip baseline.
    #[arg(long, default_value_t = 2)]
    fixed_k: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
    /// Write the per-cell decision log of an all-modules run here.
    #[arg(long)]
    decisions: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    drift_samples: usize,
    /// Multiply the gate threshold by this factor in the bounds suite.
    #[arg(long)]
    inject_fault: Option<f64>,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InterpArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Number of leading blocks the probe runs through.
    #[arg(long, default_value_t = 1)]
    probe_layers: usize,
    /// Only score the first this many timesteps.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    tau_c: f64,
    /// Heatmap CSV (`t,token,abs_phi`).
    #[arg(long)]
    out: PathBuf,
    /// JSON summary, with full interactions when the trace has few tokens.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Flags(String),
    Invariant(String),
    Io(anyhow::Error),
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        Failure::Io(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Io(e)
    }
}

type Outcome = Result<(), Failure>;

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).with_context(|| format!("cannot create {}", path.display())).map_err(Failure::Io)
}

fn load(path: &Path) -> Result<Trace, Failure> {
    let t = trace::load_trace(path).with_context(|| format!("cannot read trace {}", path.display()))?;
    t.validate().with_context(|| format!("invalid trace {}", path.display()))?;
    Ok(t)
}

fn model_for(t: &Trace) -> Result<ToyModel<f32>, Failure> {
    let h = &t.header;
    if h.heads == 0 || !h.dim.is_multiple_of(h.heads) {
        return Err(Failure::Io(anyhow::anyhow!("trace header has dim {} and {} heads", h.dim, h.heads)));
    }
    Ok(ToyModel::seeded(h.layers, h.dim, h.heads, h.seed))
}

fn gen_trace(a: GenTraceArgs) -> Outcome {
    if a.layers == 0 || a.dim == 0 || a.tokens == 0 || a.heads == 0 {
        return Err(Failure::Flags("--layers, --dim, --tokens and --heads must be positive".into()));
    }
    if !a.dim.is_multiple_of(a.heads) {
        return Err(Failure::Flags(format!("--dim {} is not divisible by --heads {}", a.dim, a.heads)));
    }
    let sched = Schedule::new(a.schedule, a.steps, a.tokens, a.dim);
    sched.validate().map_err(Failure::Flags)?;
    let model = ToyModel::<f32>::seeded(a.layers, a.dim, a.heads, a.seed);
    let inputs = make_schedule::<f32>(&sched, a.seed);
    let t = Trace::record(&model, &inputs, Some(sched), a.seed, !a.no_layer_pairs)?;
    let n = trace::write_trace(&t, create(&a.out)?)?;
    if let Some(p) = &a.model_out {
        trace::write_model(&model, create(p)?)?;
    }
    println!("wrote {} ({n} bytes): {} steps of {}x{}, {} layers, schedule {}", a.out.display(), a.steps, a.tokens, a.dim, a.layers, a.schedule);
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Outcome {
    if !(a.ridge >= 0.0) {
        return Err(Failure::Flags(format!("--ridge must be non-negative, got {}", a.ridge)));
    }
    let t = load(&a.trace)?;
    if !t.header.layer_pairs {
        return Err(Failure::Io(anyhow::anyhow!("trace {} has no layer pairs to fit on", a.trace.display())));
    }
    let cal = engine::fit_approximators::<f32>(std::slice::from_ref(&t), t.header.layers, t.header.dim, a.ridge).map_err(|e| Failure::Io(e.into()))?;
    let meta = serde_json::json!({ "ridge": a.ridge, "layers": cal.layers, "bypass": cal.bypass, "source_seed": t.header.seed });
    trace::write_approximators(&cal.set, meta, create(&a.out)?)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6e}"));
    let mut rows = vec!["layer,train_rows,heldout_rows,heldout_error,identity_error,warning".to_string()];
    for f in cal.layers.iter().chain(std::iter::once(&cal.bypass)) {
        let name = f.layer.map_or("bypass".to_string(), |l| l.to_string());
        let warn = f.warning.as_ref().map_or(String::new(), |w| format!("{w:?}"));
        rows.push(format!("{name},{},{},{},{},{warn}", f.train_rows, f.heldout_rows, fmt(f.heldout_error), fmt(f.identity_error)));
    }
    for r in &rows {
        println!("{r}");
    }
    if let Some(p) = &a.table {
        let mut w = create(p)?;
        for r in &rows {
            writeln!(w, "{r}").context("writing held-out table")?;
        }
        w.flush().context("writing held-out table")?;
    }
    for w in &cal.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> Outcome {
    let configs = Modules::parse_list(&a.ablate).map_err(Failure::Flags)?;
    if a.fixed_k == 0 {
        return Err(Failure::Flags("--fixed-k must be positive".into()));
    }
    let spec = BenchSpec {
        significance: a.alpha,
        tau_s: a.tau_s,
        gamma: a.gamma,
        skip_mode: a.skip_mode,
        methods: vec![Method::Full, Method::FixedSkip(a.fixed_k), Method::FastCache],
        configs,
        repeats: a.repeats.max(1),
        threads: bench::threads_from_env(),
    };
    spec.engine_config(Modules::ALL).validate().map_err(|e| Failure::Flags(e.to_string()))?;
    let t = load(&a.trace)?;
    let model = model_for(&t)?;
    let approx: ApproximatorSet<f32> = match &a.approximators {
        Some(p) => {
            let file = File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
            trace::read_approximators(std::io::BufReader::new(file))?.0
        }
        None if t.header.layer_pairs => engine::fit_approximators::<f32>(std::slice::from_ref(&t), t.header.layers, t.header.dim, 1e-6).map_err(|e| Failure::Io(e.into()))?.set,
        None => ApproximatorSet::identity(t.header.layers, t.header.dim),
    };
    if approx.layers.len() != t.header.layers || approx.bypass.in_dim() != t.header.dim {
        return Err(Failure::Io(anyhow::anyhow!("approximators do not match the trace shape")));
    }
    let inputs = t.inputs();
    let rows = bench::run_bench(&model, &inputs, Some(&approx), &spec).map_err(|e| Failure::Io(e.into()))?;
    bench::write_csv(&rows, create(&a.out)?).context("writing bench CSV")?;
    println!("{:<16} {:<10} {:>10} {:>8} {:>9} {:>11} {:>6}", "method", "config", "wall_ms", "speedup", "skip", "deviation", "viol");
    for r in &rows {
        println!("{:<16} {:<10} {:>10.1} {:>8.2} {:>9.3} {:>11.3e} {:>6}", r.method, r.config, r.wall_ms, r.speedup, r.skip_rate, r.deviation, r.bound_violations);
    }
    if let Some(p) = &a.decisions {
        let run = engine::run_generation(&model, &inputs, &spec.engine_config(Modules::ALL), Some(&approx)).map_err(|e| Failure::Io(e.into()))?;
        run.write_decisions_csv(create(p)?).context("writing decision log")?;
    }
    let violations: usize = rows.iter().map(|r| r.bound_violations).sum();
    if violations > 0 {
        return Err(Failure::Invariant(format!("{violations} skipped decisions exceeded the gate bound")));
    }
    Ok(())
}

fn run_verify(a: VerifyArgs) -> Outcome {
    let suites = Suite::parse(&a.suite).map_err(Failure::Flags)?;
    if let Some(f) = a.inject_fault {
        if !(f > 0.0) {
            return Err(Failure::Flags(format!("--inject-fault must be positive, got {f}")));
        }
    }
    let opts = VerifyOptions { seed: a.seed, drift_samples: a.drift_samples, threshold_fault: a.inject_fault };
    let report = verify::run_verify(&suites, &opts);
    for s in &report.suites {
        for i in &s.invariants {
            println!("{} {}/{}: measured {:.3e}, limit {:.3e}, margin {:.3e}", if i.passed { "ok  " } else { "FAIL" }, s.suite, i.name, i.measured, i.limit, i.margin);
        }
    }
    if let Some(p) = &a.report {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &report).context("writing report")?;
        w.flush().context("writing report")?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Invariant(format!("failed invariants: {}", report.failures().join(", "))))
    }
}

fn run_interp(a: InterpArgs) -> Outcome {
    let t = load(&a.trace)?;
    let h = &t.header;
    if a.probe_layers == 0 || a.probe_layers > h.layers {
        return Err(Failure::Flags(format!("--probe-layers must be in 1..={}", h.layers)));
    }
    let mut model = ToyModel::<f64>::seeded(h.layers, h.dim, h.heads, h.seed);
    model.layers.truncate(a.probe_layers);
    let model = Arc::new(model);
    let frames: Vec<_> = t.frames.iter().take(a.max_steps.unwrap_or(usize::MAX)).map(|f| f.input.cast::<f64>()).collect();
    let mut phis: Vec<Vec<f64>> = Vec::with_capacity(frames.len());
    let mut reuse = Vec::new();
    let mut full = Vec::new();
    for (i, x) in frames.iter().enumerate() {
        // Each step is scored against the previous input as the masking baseline.
        let baseline = if i == 0 { x.map(|_| 0.0) } else { frames[i - 1].clone() };
        let probe = ProbeFunction::model_readout(model.clone(), baseline, h.seed);
        let phi = interp::shapley_singletons(&probe, x).map_err(|e| Failure::Io(e.into()))?;
        if let Some(prev) = phis.last() {
            let flags = interp::cache_trigger(&phi, prev, a.tau_c).map_err(|e| Failure::Io(e.into()))?;
            reuse.push(flags.iter().filter(|&&f| f).count());
        }
        if h.tokens <= BRUTE_FORCE_CAP && a.report.is_some() {
            let r = interp::harsanyi(&probe, x).map_err(|e| Failure::Io(e.into()))?;
            full.push(serde_json::json!({ "t": i, "order_sums": r.order_sums, "efficiency_residual": r.efficiency_residual }));
        }
        phis.push(phi);
    }
    write_heatmap_csv(&phis, create(&a.out)?).context("writing heatmap")?;
    println!("wrote {} ({} steps x {} tokens)", a.out.display(), phis.len(), h.tokens);
    if let Some(p) = &a.report {
        let json = serde_json::json!({
            "tokens": h.tokens,
            "steps": phis.len(),
            "probe_layers": a.probe_layers,
            "tau_c": a.tau_c,
            "reuse_tokens_per_step": reuse,
            "interactions": full,
        });
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &json).context("writing report")?;
        w.flush().context("writing report")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FLAGS } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Bench(a) => run_bench(a),
        Command::Verify(a) => run_verify(a),
        Command::Interp(a) => run_interp(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Flags(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_FLAGS)
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("invariant violation: {m}");
            ExitCode::from(EXIT_INVARIANT)
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_IO)
        }
    }
}
