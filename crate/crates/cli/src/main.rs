//! `dsagcn` command-line driver.
//!
//! Every subcommand that trains or evaluates takes the same run options:
//! an optional JSON config (a bare training config or a snapshot written by
//! an earlier run) with flags taking precedence. Outputs go under `--out`,
//! which defaults to `$DSAGCN_OUT_DIR` and then `runs`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dsagcn_core::diff::{DiffArray, Scalar};
use dsagcn_core::graph::{default_topk, GraphBatch};
use dsagcn_core::model::{windows_to_array, ForwardMode, Model, VariantId};
use dsagcn_core::signal::{make_splits, synth_generate, write_dataset, Sample, Split, SynthConfig, WindowedDataset};
use dsagcn_core::train::{
    evaluate, export_features, run_task_matrix, sweep_k, sweep_tradeoffs, train, write_rows, TrainConfig, TransferTask,
    HOP_VALUES, TRADEOFF_VALUES,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "dsagcn", version, about = "Cross-domain bearing fault diagnosis with graph-aligned domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-or-more-condition dataset (manifest + raw float32 files).
    SynthGen(SynthArgs),
    /// Train one variant on one transfer task; writes a checkpoint and the loss trace.
    Train(TaskArgs),
    /// Evaluate a checkpoint on the test split of one condition.
    Eval(EvalArgs),
    /// Train every ordered pair of conditions, `repetitions` times each.
    Matrix(MatrixArgs),
    /// Accuracy as a function of the TAGCN hop count.
    SweepK(SweepKArgs),
    /// Accuracy over a grid of adversarial and discrepancy loss weights.
    SweepTradeoffs(SweepTradeoffArgs),
    /// Dump intermediate activations of a checkpoint as CSV.
    ExportFeatures(ExportArgs),
    /// Dump the sparsified similarity graph of one evaluation batch.
    DumpGraph(DumpGraphArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

/// Options shared by every command that loads data and a training config.
#[derive(Args, Clone)]
struct RunArgs {
    /// Dataset manifest (JSON) written by `synth-gen` or the archive converter.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON training config, or a `resolved_config.json` from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "DSAGCN_OUT_DIR", default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    variant: Option<VariantId>,
    /// Seed for initialization, dropout, batching and the data split.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Windows per domain in each batch (n).
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Weight of the adversarial loss.
    #[arg(long)]
    mu: Option<f64>,
    /// Weight of the discrepancy loss.
    #[arg(long)]
    beta: Option<f64>,
    /// TAGCN hop count.
    #[arg(long)]
    hops: Option<usize>,
    /// Neighbours kept per node in the similarity graph.
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Training windows per (condition, class).
    #[arg(long)]
    train_per_class: Option<usize>,
    /// Test windows per (condition, class).
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Skip the per-epoch target evaluation (the final one always runs).
    #[arg(long)]
    no_epoch_eval: bool,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

#[derive(Args)]
struct TaskArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Labelled source condition.
    #[arg(long)]
    source: Option<String>,
    /// Unlabelled target condition.
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the manifest and recordings.
    #[arg(long, env = "DSAGCN_OUT_DIR", default_value = "runs")]
    out: PathBuf,
    /// JSON generator config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    conditions: Option<usize>,
    #[arg(long)]
    windows_per_class: Option<usize>,
    #[arg(long)]
    window_length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Relative frequency change per condition step.
    #[arg(long)]
    frequency_shift: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Condition whose test split is scored.
    #[arg(long)]
    condition: String,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated subset of conditions; defaults to all in the manifest.
    #[arg(long, value_delimiter = ',')]
    conditions: Vec<String>,
}

#[derive(Args)]
struct SweepKArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// Comma-separated hop counts.
    #[arg(long, value_delimiter = ',', default_values_t = HOP_VALUES)]
    k: Vec<usize>,
}

#[derive(Args)]
struct SweepTradeoffArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, value_delimiter = ',', default_values_t = TRADEOFF_VALUES)]
    betas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = TRADEOFF_VALUES)]
    mus: Vec<f64>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated tap names (input, cnn, fc1, tagcn, logits, domain_probs).
    #[arg(long, value_delimiter = ',', default_value = "cnn,tagcn")]
    taps: Vec<String>,
}

#[derive(Args)]
struct DumpGraphArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Windows taken from each domain's test split.
    #[arg(long, default_value_t = 16)]
    per_domain: usize,
}

/// Everything needed to reproduce a run; written as `resolved_config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunSnapshot {
    command: String,
    manifest: Option<PathBuf>,
    source: Option<String>,
    target: Option<String>,
    precision: Precision,
    train: TrainConfig,
}

impl RunArgs {
    fn resolve(&self, command: &str, source: Option<String>, target: Option<String>) -> Result<RunSnapshot> {
        let mut snap = match &self.config {
            None => RunSnapshot {
                command: command.into(),
                manifest: None,
                source: None,
                target: None,
                precision: Precision::F32,
                train: TrainConfig::default(),
            },
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                let value: serde_json::Value =
                    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
                if value.get("train").is_some() {
                    let mut s: RunSnapshot = serde_json::from_value(value).with_context(|| format!("config {}", path.display()))?;
                    s.command = command.into();
                    s
                } else {
                    RunSnapshot {
                        command: command.into(),
                        manifest: None,
                        source: None,
                        target: None,
                        precision: Precision::F32,
                        train: serde_json::from_value(value).with_context(|| format!("config {}", path.display()))?,
                    }
                }
            }
        };
        let t = &mut snap.train;
        if let Some(v) = self.variant {
            t.variant = v;
        }
        if let Some(s) = self.seed {
            t.seed = s;
            t.split.seed = s;
        }
        macro_rules! set {
            ($($flag:ident => $field:expr),*) => {$(
                if let Some(v) = self.$flag {
                    $field = v;
                }
            )*};
        }
        set!(epochs => t.epochs, batch_size => t.batch_size, learning_rate => t.learning_rate, mu => t.mu,
             beta => t.beta, hops => t.hops, repetitions => t.repetitions,
             train_per_class => t.split.train, test_per_class => t.split.test);
        if self.topk.is_some() {
            t.topk = self.topk;
        }
        if self.no_epoch_eval {
            t.eval_each_epoch = false;
        }
        if let Some(p) = self.precision {
            snap.precision = p;
        }
        if self.manifest.is_some() {
            snap.manifest = self.manifest.clone();
        }
        if source.is_some() {
            snap.source = source;
        }
        if target.is_some() {
            snap.target = target;
        }
        snap.train.validate()?;
        Ok(snap)
    }
}

impl RunSnapshot {
    fn manifest(&self) -> Result<&Path> {
        match &self.manifest {
            Some(p) if p.exists() => Ok(p),
            Some(p) => bail!("manifest {} does not exist", p.display()),
            None => bail!("no dataset: pass --manifest or a config that names one"),
        }
    }

    fn task(&self) -> Result<TransferTask> {
        match (&self.source, &self.target) {
            (Some(s), Some(t)) => Ok(TransferTask::new(s.clone(), t.clone())?),
            _ => bail!("this command needs --source and --target"),
        }
    }

    fn load(&self) -> Result<(WindowedDataset, BTreeMap<String, Split>)> {
        let path = self.manifest()?;
        let data = WindowedDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
        let splits = make_splits(&data, &self.train.split)?;
        Ok((data, splits))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("resolved_config.json");
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn csv_out<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_rows(BufWriter::new(f), rows)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let header = dsagcn_core::diff::checkpoint::load_checkpoint(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?
        .header;
    Ok(match header.meta.get("precision").map(String::as_str) {
        Some("f64") => Precision::F64,
        _ => Precision::F32,
    })
}

fn synth_gen(args: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => {$(
            if let Some(v) = args.$f {
                cfg.$f = v;
            }
        )*};
    }
    set!(classes, conditions, windows_per_class, window_length, seed, frequency_shift);
    if args.window_length.is_some() && args.config.is_none() {
        cfg.window_step = cfg.window_length;
    }
    let (manifest, signals) = synth_generate(&cfg)?;
    let path = write_dataset(&args.out, &manifest, &signals)?;
    fs::write(args.out.join("synth_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!("{}", path.display());
    Ok(())
}

fn run_train<T: Scalar>(snap: &RunSnapshot, out: &Path) -> Result<()> {
    let task = snap.task()?;
    let (data, splits) = snap.load()?;
    snap.write(out)?;
    let mut outcome = train::<T>(&task, &snap.train, &splits, data.manifest.class_count())?;
    csv_out(&out.join("loss_trace.csv"), &outcome.trace)?;
    let meta = BTreeMap::from([
        ("source".to_string(), task.source.clone()),
        ("target".to_string(), task.target.clone()),
        ("seed".to_string(), snap.train.seed.to_string()),
        ("precision".to_string(), T::DTYPE.to_string()),
        ("accuracy".to_string(), format!("{:.4}", outcome.accuracy)),
    ]);
    let ckpt = out.join("model.ckpt");
    outcome.model.save(&ckpt, meta)?;
    println!(
        "{} {}->{}: target accuracy {:.2}% in {:.1} s",
        snap.train.variant, task.source, task.target, outcome.accuracy, outcome.wall_time_s
    );
    Ok(())
}

fn test_samples(splits: &BTreeMap<String, Split>, condition: &str) -> Result<Vec<Sample>> {
    match splits.get(condition) {
        Some(s) => Ok(s.test.clone()),
        None => bail!(
            "condition `{condition}` not in dataset; available: {}",
            splits.keys().cloned().collect::<Vec<_>>().join(", ")
        ),
    }
}

fn run_eval<T: Scalar>(args: &EvalArgs, snap: &RunSnapshot) -> Result<()> {
    let (_, splits) = snap.load()?;
    let samples = test_samples(&splits, &args.condition)?;
    let mut model = Model::<T>::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let acc = evaluate(&mut model, &samples, 2 * snap.train.batch_size)?;
    snap.write(&args.run.out)?;
    let report = serde_json::json!({
        "checkpoint": args.checkpoint,
        "condition": args.condition,
        "windows": samples.len(),
        "accuracy": acc,
    });
    fs::write(args.run.out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    println!("{}: accuracy {acc:.2}% on {} windows", args.condition, samples.len());
    Ok(())
}

fn run_matrix<T: Scalar>(args: &MatrixArgs, snap: &RunSnapshot) -> Result<()> {
    let (data, splits) = snap.load()?;
    let conditions = if args.conditions.is_empty() { data.manifest.conditions.clone() } else { args.conditions.clone() };
    snap.write(&args.run.out)?;
    let result = run_task_matrix::<T>(&splits, &conditions, &snap.train, data.manifest.class_count())?;
    csv_out(&args.run.out.join("matrix.csv"), &result.rows)?;
    fs::write(args.run.out.join("matrix_summary.json"), serde_json::to_string_pretty(&result.summaries)?)?;
    for s in &result.summaries {
        println!("{}->{}: {:.2} ± {:.2} ({} failed)", s.source, s.target, s.mean, s.std, s.failures.len());
    }
    Ok(())
}

fn run_sweep_k<T: Scalar>(args: &SweepKArgs, snap: &RunSnapshot) -> Result<()> {
    let task = snap.task()?;
    let (data, splits) = snap.load()?;
    snap.write(&args.task.run.out)?;
    let rows = sweep_k::<T>(&task, &snap.train, &splits, data.manifest.class_count(), &args.k)?;
    csv_out(&args.task.run.out.join("sweep_k.csv"), &rows)?;
    Ok(())
}

fn run_sweep_tradeoffs<T: Scalar>(args: &SweepTradeoffArgs, snap: &RunSnapshot) -> Result<()> {
    let task = snap.task()?;
    let (data, splits) = snap.load()?;
    snap.write(&args.task.run.out)?;
    let rows = sweep_tradeoffs::<T>(&task, &snap.train, &splits, data.manifest.class_count(), &args.betas, &args.mus)?;
    csv_out(&args.task.run.out.join("sweep_tradeoffs.csv"), &rows)?;
    Ok(())
}

fn domain_samples(snap: &RunSnapshot) -> Result<Vec<Sample>> {
    let task = snap.task()?;
    let (_, splits) = snap.load()?;
    let mut samples = test_samples(&splits, &task.source)?;
    test_samples(&splits, &task.target)?;
    samples.extend(splits[&task.target].as_target().test);
    Ok(samples)
}

fn run_export<T: Scalar>(args: &ExportArgs, snap: &RunSnapshot) -> Result<()> {
    let samples = domain_samples(snap)?;
    let mut model = Model::<T>::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let taps: Vec<&str> = args.taps.iter().map(String::as_str).collect();
    let exports = export_features(&mut model, &samples, &taps, 2 * snap.train.batch_size)?;
    let out = &args.task.run.out;
    snap.write(out)?;
    for e in exports {
        let path = out.join(format!("features_{}.csv", e.tap));
        e.write_csv(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))?;
        log::info!("wrote {} ({} x {})", path.display(), e.rows.len(), e.width);
    }
    Ok(())
}

fn run_dump_graph<T: Scalar>(args: &DumpGraphArgs, snap: &RunSnapshot) -> Result<()> {
    let task = snap.task()?;
    let (_, splits) = snap.load()?;
    let take = |cond: &str| -> Result<Vec<Vec<f32>>> {
        let s = test_samples(&splits, cond)?;
        if s.len() < args.per_domain {
            bail!("condition `{cond}` has {} test windows, need {}", s.len(), args.per_domain);
        }
        Ok(s[..args.per_domain].iter().map(|s| s.window.clone()).collect())
    };
    let mut windows = take(&task.source)?;
    windows.extend(take(&task.target)?);
    let mut model = Model::<T>::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    if !model.wiring().graph {
        bail!("variant {} has no graph layers", model.variant);
    }
    let input = windows_to_array::<T>(&windows)?;
    let taps = model.forward(&input, ForwardMode::eval(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let features: &DiffArray<T> = taps.get("fc1")?.expect("fc1 tap is always present");
    let k = model.arch.topk.unwrap_or_else(|| default_topk(windows.len()));
    let graph = GraphBatch::build(features, k)?;
    let out = &args.task.run.out;
    snap.write(out)?;
    let path = out.join("graph.coo");
    fs::write(&path, format!("# nodes {} k {k}; rows 0..{} are source\n{}", windows.len(), args.per_domain, graph.sparse_coo()))?;
    println!("{}", path.display());
    Ok(())
}

macro_rules! dispatch {
    ($precision:expr, $f:ident($($arg:expr),*)) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Train(a) => {
            let snap = a.run.resolve("train", a.source.clone(), a.target.clone())?;
            dispatch!(snap.precision, run_train(&snap, &a.run.out))
        }
        Command::Eval(a) => {
            let snap = a.run.resolve("eval", None, None)?;
            dispatch!(checkpoint_precision(&a.checkpoint)?, run_eval(&a, &snap))
        }
        Command::Matrix(a) => {
            let snap = a.run.resolve("matrix", None, None)?;
            dispatch!(snap.precision, run_matrix(&a, &snap))
        }
        Command::SweepK(a) => {
            let snap = a.task.run.resolve("sweep-k", a.task.source.clone(), a.task.target.clone())?;
            dispatch!(snap.precision, run_sweep_k(&a, &snap))
        }
        Command::SweepTradeoffs(a) => {
            let snap = a.task.run.resolve("sweep-tradeoffs", a.task.source.clone(), a.task.target.clone())?;
            dispatch!(snap.precision, run_sweep_tradeoffs(&a, &snap))
        }
        Command::ExportFeatures(a) => {
            let snap = a.task.run.resolve("export-features", a.task.source.clone(), a.task.target.clone())?;
            dispatch!(checkpoint_precision(&a.checkpoint)?, run_export(&a, &snap))
        }
        Command::DumpGraph(a) => {
            let snap = a.task.run.resolve("dump-graph", a.task.source.clone(), a.task.target.clone())?;
            dispatch!(checkpoint_precision(&a.checkpoint)?, run_dump_graph(&a, &snap))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
