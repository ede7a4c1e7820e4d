use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use nexume::devmodel::{micro_profile, HardwareProfile, ProfileRegistry};
use nexume::dynfit::train::{train, EnergyContext};
use nexume::dynfit::{Activation, Dataset, DynfitError, LayerSpec, Model, Network, PolicyKind, Tensor, TrainConfig};
use nexume::ehsim::{load_trace, CapacitorConfig, CapacitorState, EnergySim, EnergyTrace};
use nexume::intermittent::IntermittentError;
use nexume::nas::{enumerate_and_filter, search, write_report_csv, NasEnv, NasError, SearchSpace};
use nexume::scheduler::{run_inference, InferenceConfig, InferenceReport, PlanMode, SchedulerError};

#[derive(Parser)]
#[command(name = "nexume", version, about = "Train and run small networks on simulated harvested power")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulated memory size/stride sweep, printed as CSV.
    Profile {
        /// Profile file or built-in name.
        #[arg(long, default_value = "synthetic-mid")]
        profile: String,
        /// Working-set sizes in bytes (comma separated).
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "64")]
        strides: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model with dynamic dropout and quantization.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Re-plan layer loops against this profile during training.
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        budget_uj: Option<f64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Run inference on harvested power and write the SLO report.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset to draw inputs and labels from; without it a zero input is used.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Consecutive inferences on the same capacitor.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        slo_ms: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        budget_uj: Option<f64>,
        /// Checkpoint after every loop iteration.
        #[arg(long)]
        naive: bool,
        #[arg(long)]
        no_escalation: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Enumerate, filter, and train candidate architectures.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        slo_ms: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training steps per feasible candidate.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize one or more simulate reports.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Experiment file. Paths are relative to the file's directory; flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentConfig {
    seed: Option<u64>,
    trace: Option<PathBuf>,
    profile: Option<String>,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    slo_ms: Option<f64>,
    budget_uj: Option<f64>,
    layers: Option<Vec<LayerSpec>>,
    train: TrainConfig,
    capacitor: CapacitorConfig,
    inference: Option<InferenceConfig>,
    search: SearchSpace,
    search_steps: Option<usize>,
    val_fraction: Option<f64>,
}

/// Failure class, mapped to the exit code.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Validation(e.into())
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn classify_dynfit(e: DynfitError) -> Failure {
    match e {
        DynfitError::NonFiniteLoss | DynfitError::NonFiniteGradient | DynfitError::NonFiniteHessian => runtime(e),
        e => Failure::Validation(e.into()),
    }
}

fn classify_sched(e: SchedulerError) -> Failure {
    match e {
        e if e.is_starvation() => runtime(e),
        SchedulerError::Dynfit(d) => classify_dynfit(d),
        e => Failure::Validation(e.into()),
    }
}

fn classify_nas(e: NasError) -> Failure {
    match e {
        NasError::Dynfit(d) => classify_dynfit(d),
        NasError::Intermittent(e @ IntermittentError::Starvation { .. }) => runtime(e),
        NasError::Csv(e) => runtime(e),
        e => Failure::Validation(e.into()),
    }
}

impl ExperimentConfig {
    fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.trace, &mut cfg.model, &mut cfg.data, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &mut cfg.profile {
            if ProfileRegistry::with_builtins().get(p).is_err() && Path::new(p).is_relative() {
                *p = base.join(&*p).display().to_string();
            }
        }
        Ok(cfg)
    }
}

fn resolve_seed(flag: Option<u64>, cfg: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag.or(cfg) {
        return Ok(s);
    }
    match std::env::var("NEXUME_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| anyhow!("NEXUME_SEED={v:?} is not an unsigned integer").into()),
        Err(_) => Err(anyhow!("a seed is required: pass --seed, set \"seed\" in the config, or set NEXUME_SEED").into()),
    }
}

fn require<T>(v: Option<T>, what: &str) -> Result<T, Failure> {
    v.ok_or_else(|| anyhow!("missing {what}").into())
}

fn load_profile(spec: &str) -> Result<HardwareProfile, Failure> {
    if let Ok(p) = ProfileRegistry::with_builtins().get(spec) {
        return Ok(p.clone());
    }
    Ok(HardwareProfile::load(spec).with_context(|| format!("loading profile {spec}"))?)
}

fn load_trace_file(path: &Path) -> Result<EnergyTrace, Failure> {
    Ok(load_trace(path).with_context(|| format!("loading trace {}", path.display()))?)
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::load(path).with_context(|| format!("loading data {}", path.display()))?)
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a temporary file in {}", dir.display())).map_err(runtime)?;
    tmp.write_all(bytes).map_err(runtime)?;
    tmp.as_file().sync_all().map_err(runtime)?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display())).map_err(runtime)?;
    Ok(())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => std::io::stdout().write_all(bytes).map_err(runtime),
    }
}

fn log_event(value: serde_json::Value) {
    eprintln!("{value}");
}

fn default_layers(data: &Dataset) -> Vec<LayerSpec> {
    if data.input.h > 1 || data.input.w > 1 {
        vec![
            LayerSpec::Conv2d { filters: 8, kh: 3, kw: 3, activation: Activation::Relu },
            LayerSpec::AvgPool { size: 2 },
            LayerSpec::Dense { outputs: 16, activation: Activation::Relu },
            LayerSpec::Dense { outputs: data.classes, activation: Activation::Identity },
        ]
    } else {
        vec![
            LayerSpec::Dense { outputs: 16, activation: Activation::Tanh },
            LayerSpec::Dense { outputs: data.classes, activation: Activation::Identity },
        ]
    }
}

fn cmd_profile(profile: &str, sizes: Vec<u64>, strides: Vec<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let device = load_profile(profile)?;
    let sizes = if sizes.is_empty() { (10..=17).map(|k| 1u64 << k).collect() } else { sizes };
    if strides.is_empty() || strides.contains(&0) || sizes.contains(&0) {
        return Err(anyhow!("sizes and strides must be positive").into());
    }
    let mut text = String::from("size_bytes,stride_bytes,latency_ns\n");
    for p in micro_profile(&sizes, &strides, &device) {
        text.push_str(&format!("{},{},{}\n", p.size, p.stride, p.latency_ns));
    }
    emit(out.as_deref(), text.as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    policy: Option<String>,
    epochs: Option<usize>,
    profile: Option<String>,
    budget_uj: Option<f64>,
    quiet: bool,
) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config.as_deref())?;
    let seed = resolve_seed(seed, cfg.seed)?;
    let data = load_data(&require(data.or(cfg.data), "--data")?)?;
    let out = require(out.or(cfg.out), "--out")?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    tc.policy.seed = seed;
    if let Some(p) = policy {
        tc.policy.kind = p.parse::<PolicyKind>()?;
    }
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    tc.validate()?;
    let layers = cfg.layers.clone().unwrap_or_else(|| default_layers(&data));
    let net = Network::initialized(data.input, &layers, seed)?;
    let device = profile.or(cfg.profile).map(|p| load_profile(&p)).transpose()?;
    let budget = budget_uj.or(cfg.budget_uj).unwrap_or(20.0);
    let ctx = device.as_ref().map(|d| EnergyContext { profile: d, budget_uj: budget });
    let outcome = train(net, &data, &tc, ctx.as_ref()).map_err(classify_dynfit)?;
    if !quiet {
        for e in &outcome.history {
            log_event(serde_json::json!({"event": "epoch", "epoch": e.epoch, "loss": e.loss, "accuracy": e.accuracy}));
        }
        if let Some(f) = &outcome.finetune {
            log_event(serde_json::json!({"event": "finetune", "selected": f.selected, "steps": f.steps, "reached": f.reached}));
        }
    }
    let model = Model {
        net: outcome.state.net,
        quant: Some(outcome.state.quant.q),
        site_probs: Some(outcome.site_probs),
        policy: Some(tc.policy.kind),
    };
    write_atomic(&out, model.to_json_string().as_bytes())
}

#[derive(Serialize, Deserialize)]
struct MultiReport {
    reports: Vec<InferenceReport>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    config: Option<PathBuf>,
    trace: Option<PathBuf>,
    profile: Option<String>,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    sample: usize,
    count: usize,
    slo_ms: Option<f64>,
    seed: Option<u64>,
    budget_uj: Option<f64>,
    naive: bool,
    no_escalation: bool,
    out: Option<PathBuf>,
    quiet: bool,
) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config.as_deref())?;
    let seed = resolve_seed(seed, cfg.seed)?;
    let trace = load_trace_file(&require(trace.or(cfg.trace), "--trace")?)?;
    let device = load_profile(&require(profile.or(cfg.profile), "--profile")?)?;
    let model_path = require(model.or(cfg.model), "--model")?;
    let model = Model::load(&model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let data = data.or(cfg.data).map(|p| load_data(&p)).transpose()?;
    let out = out.or(cfg.out);
    if count == 0 {
        return Err(anyhow!("--count must be at least 1").into());
    }

    let mut ic = cfg.inference.unwrap_or_default();
    ic.seed = seed;
    if let Some(s) = slo_ms.or(cfg.slo_ms) {
        ic.deadline_ms = s;
    }
    if let Some(b) = budget_uj.or(cfg.budget_uj) {
        ic.budget_uj = b;
    }
    if naive {
        ic.plan_mode = PlanMode::PerIteration;
    }
    if no_escalation {
        ic.escalation.enabled = false;
    }
    ic.validate().map_err(classify_sched)?;

    let cap = CapacitorState::from_config(&cfg.capacitor).map_err(|e| anyhow!("capacitor: {e}"))?;
    let mut sim = EnergySim::new(&trace, cap, trace.start());
    let mut reports = Vec::with_capacity(count);
    for k in 0..count {
        let (x, label) = match &data {
            Some(d) => {
                let s = d.samples.get(sample + k).ok_or_else(|| anyhow!("data has {} samples, sample {} requested", d.len(), sample + k))?;
                (s.x.clone(), Some(s.label))
            }
            None => (Tensor::zeros(model.net.input), None),
        };
        let run_cfg = InferenceConfig { seed: seed.wrapping_add(k as u64), ..ic.clone() };
        let outcome = run_inference(&model, &x, label, &device, &mut sim, &run_cfg).map_err(classify_sched)?;
        if !quiet {
            for e in &outcome.events {
                log_event(serde_json::json!({"inference": k, "t_ms": e.t_ms, "task": e.task, "kind": e.kind, "energy_nj": e.energy_nj}));
            }
        }
        reports.push(outcome.report());
    }
    if !sim.balanced() {
        return Err(runtime(anyhow!("energy ledger does not balance")));
    }
    let text = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0])
    } else {
        serde_json::to_string_pretty(&MultiReport { reports })
    }
    .map_err(runtime)?;
    emit(out.as_deref(), format!("{text}\n").as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    trace: Option<PathBuf>,
    profile: Option<String>,
    slo_ms: Option<f64>,
    seed: Option<u64>,
    steps: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config.as_deref())?;
    let seed = resolve_seed(seed, cfg.seed)?;
    let data = load_data(&require(data.or(cfg.data), "--data")?)?;
    let trace = load_trace_file(&require(trace.or(cfg.trace), "--trace")?)?;
    let device = load_profile(&require(profile.or(cfg.profile), "--profile")?)?;
    let slo = slo_ms.or(cfg.slo_ms).unwrap_or(f64::INFINITY);
    let steps = steps.or(cfg.search_steps).unwrap_or(50);
    let frac = cfg.val_fraction.unwrap_or(0.25);
    if !(0.0..1.0).contains(&frac) {
        return Err(anyhow!("val_fraction must be in [0, 1)").into());
    }
    let space = SearchSpace { input: data.input, classes: data.classes, ..cfg.search.clone() };
    let cap = CapacitorState::from_config(&cfg.capacitor).map_err(|e| anyhow!("capacitor: {e}"))?;
    let env = NasEnv {
        profile: &device,
        trace: &trace,
        initial_uj: cap.stored_nj() as f64 / 1_000.0,
        budget_uj: cfg.budget_uj.unwrap_or(20.0),
    };
    let evaluated = enumerate_and_filter(&space, &env, slo).map_err(classify_nas)?;
    let (val, train_set) = data.split_at(((data.len() as f64) * frac).round() as usize);
    let tc = TrainConfig { seed, policy: nexume::dynfit::DropoutPolicy { seed, ..cfg.train.policy.clone() }, ..cfg.train.clone() };
    let ranked = search(&evaluated, &train_set, &val, steps, &tc, slo).map_err(classify_nas)?;
    let mut buf = Vec::new();
    write_report_csv(&ranked, &mut buf).map_err(classify_nas)?;
    emit(out.as_deref(), &buf)
}

#[derive(Serialize)]
struct Summary {
    inferences: usize,
    correct: usize,
    counted_correct: usize,
    accuracy: f64,
    slo_accuracy: f64,
    mean_latency_ms: f64,
    restores: usize,
    escalations: usize,
    #[serde(rename = "energy_consumed_uJ")]
    energy_consumed_uj: f64,
}

fn cmd_report(inputs: Vec<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut all: Vec<InferenceReport> = Vec::new();
    for p in &inputs {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading report {}", p.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing report {}", p.display()))?;
        if value.get("reports").is_some() {
            all.extend(serde_json::from_value::<MultiReport>(value).with_context(|| format!("parsing report {}", p.display()))?.reports);
        } else {
            all.push(serde_json::from_value(value).with_context(|| format!("parsing report {}", p.display()))?);
        }
    }
    let n = all.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let correct = all.iter().filter(|r| r.correct).count();
    let counted = all.iter().filter(|r| r.counted_correct).count();
    let s = Summary {
        inferences: n,
        correct,
        counted_correct: counted,
        accuracy: frac(correct),
        slo_accuracy: frac(counted),
        mean_latency_ms: if n == 0 { 0.0 } else { all.iter().map(|r| r.latency_ms).sum::<f64>() / n as f64 },
        restores: all.iter().map(|r| r.restores).sum(),
        escalations: all.iter().map(|r| r.escalations).sum(),
        energy_consumed_uj: all.iter().map(|r| r.energy_consumed_uj).sum(),
    };
    let text = serde_json::to_string_pretty(&s).map_err(runtime)?;
    emit(out.as_deref(), format!("{text}\n").as_bytes())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Profile { profile, sizes, strides, out } => cmd_profile(&profile, sizes, strides, out),
        Cmd::Train { config, data, out, seed, policy, epochs, profile, budget_uj, quiet } => {
            cmd_train(config, data, out, seed, policy, epochs, profile, budget_uj, quiet)
        }
        Cmd::Simulate { config, trace, profile, model, data, sample, count, slo_ms, seed, budget_uj, naive, no_escalation, out, quiet } => {
            cmd_simulate(config, trace, profile, model, data, sample, count, slo_ms, seed, budget_uj, naive, no_escalation, out, quiet)
        }
        Cmd::Search { config, data, trace, profile, slo_ms, seed, steps, out } => cmd_search(config, data, trace, profile, slo_ms, seed, steps, out),
        Cmd::Report { inputs, out } => cmd_report(inputs, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
