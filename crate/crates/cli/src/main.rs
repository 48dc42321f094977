use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use semise_core::evalkit::{
    alpha_sweep, dataset_digest, evaluate_classification, evaluate_ordering, evaluate_segmentation,
    parse_alpha_spec, write_metrics_csv, write_sweep_csv, MetricsReport,
};
use semise_core::pipeline::{
    advance, decode_checkpoint, load_checkpoint, parse_key_values, prepare, save_checkpoint, write_loss_csv,
    Checkpoint, TrainConfig, CHECKPOINT_MAGIC, CONFIG_KEYS,
};
use semise_core::selfcheck::{run_selfcheck, SelfCheckOptions, SELFCHECK_TOLERANCE};
use semise_core::synthdata::{
    decode_dataset, generate_dataset, read_dataset, sample_pairs, write_dataset, Dataset, BENCHMARK_CLASSES,
    BENCHMARK_PER_CLASS, BENCHMARK_SEED, BENCHMARK_SIZE, DATASET_MAGIC,
};
use semise_core::{write_atomic, SemiseError};

const SEED_ENV: &str = "SEMISE_SEED";

#[derive(Parser)]
#[command(name = "semise", version, about = "Severity representation learning on synthetic lesion images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset file.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = BENCHMARK_CLASSES)]
        classes: usize,
        #[arg(long, default_value_t = BENCHMARK_PER_CLASS)]
        per_class: usize,
        /// Square image side, a multiple of 8.
        #[arg(long, default_value_t = BENCHMARK_SIZE)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run both training phases and write a checkpoint and loss CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Override one config key, e.g. `--set phase2_epochs=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Defaults to `<checkpoint>.losses.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Continue from a partially trained checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["config", "seed", "alpha", "overrides"])]
        resume: Option<PathBuf>,
        /// Stop after this many further epochs (both phases counted).
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Train a probe on the frozen encoder (or measure ordering) and write a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        /// Output prefix; writes `<out>.csv`, `<out>.json` and `<out>.manifest.json`.
        #[arg(long)]
        out: PathBuf,
        /// Which split to score.
        #[arg(long, value_enum, default_value_t = EvalOn::Test)]
        on: EvalOn,
    },
    /// Train and classify once per α value.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// `start:end:step` or a comma-separated list.
        #[arg(long, default_value = "0:1:0.1")]
        alphas: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of every loss, layer and network.
    Selfcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Summarize a dataset or checkpoint file.
    Inspect { path: PathBuf },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Classify,
    Segment,
    Ordering,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Segment => "segment",
            Task::Ordering => "ordering",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalOn {
    Train,
    Test,
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config_path: Option<String>,
    config: BTreeMap<String, String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: u64,
    exit_status: u8,
    wall_time_secs: f64,
}

enum Failure {
    Usage(String),
    Runtime(String),
    Check(String),
}

impl From<SemiseError> for Failure {
    fn from(e: SemiseError) -> Self {
        if e.is_config() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) | Failure::Check(_) => 1,
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Manifest under construction; written when the command returns.
struct Run {
    manifest: Option<PathBuf>,
    record: RunManifest,
}

impl Run {
    fn new(command: &str) -> Self {
        Run {
            manifest: None,
            record: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                config_path: None,
                config: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                seed: 0,
                exit_status: 0,
                wall_time_secs: 0.0,
            },
        }
    }

    fn config(&mut self, path: Option<&Path>, cfg: &TrainConfig) {
        self.record.config_path = path.map(display);
        self.record.config = CONFIG_KEYS
            .iter()
            .map(|k| (k.to_string(), cfg.get(k).expect("known key")))
            .collect();
        self.record.seed = cfg.seed;
    }

    fn input(&mut self, p: &Path) {
        self.record.inputs.push(display(p));
    }

    fn output(&mut self, p: &Path) {
        self.record.outputs.push(display(p));
    }

    fn finish(mut self, status: u8, elapsed: f64) -> std::result::Result<(), String> {
        let Some(path) = self.manifest.take() else {
            return Ok(());
        };
        self.record.exit_status = status;
        self.record.wall_time_secs = elapsed;
        self.record.outputs.retain(|o| Path::new(o).exists());
        let mut json = serde_json::to_string_pretty(&self.record).map_err(|e| e.to_string())?;
        json.push('\n');
        write_atomic(&path, json.as_bytes()).map_err(|e| format!("writing manifest {}: {e}", path.display()))
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn env_seed() -> std::result::Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Defaults, then the config file, then `SEMISE_SEED` if the file sets no
/// seed, then `--set` overrides, then explicit flags.
fn resolve_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    alpha: Option<f64>,
) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    let mut file_sets_seed = false;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
        let entries = parse_key_values(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
        for (line, k, v) in entries {
            cfg.set(&k, &v)
                .map_err(|e| Failure::Usage(format!("{}: line {line}: {e}", p.display())))?;
            file_sets_seed |= k == "seed";
        }
    }
    if !file_sets_seed {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(a) = alpha {
        cfg.alpha = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(run: &mut Run, path: &Path) -> std::result::Result<Dataset, Failure> {
    run.input(path);
    read_dataset(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_generate(
    run: &mut Run,
    out: &Path,
    classes: usize,
    per_class: usize,
    size: usize,
    seed: Option<u64>,
) -> CmdResult {
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(BENCHMARK_SEED),
    };
    run.manifest = Some(with_suffix(out, ".manifest.json"));
    run.record.seed = seed;
    run.record.config = [
        ("classes", classes.to_string()),
        ("per_class", per_class.to_string()),
        ("size", size.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let data = generate_dataset(per_class, classes, size, size, seed)?;
    write_dataset(out, &data).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    run.output(out);
    println!("wrote {} records to {}", data.records.len(), out.display());
    for (s, n) in data.class_counts().iter().enumerate() {
        println!("  severity {s}: {n}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    run: &mut Run,
    config: Option<&Path>,
    data_path: &Path,
    out: &Path,
    seed: Option<u64>,
    alpha: Option<f64>,
    overrides: &[String],
    loss_csv: Option<&Path>,
    resume: Option<&Path>,
    max_epochs: Option<usize>,
) -> CmdResult {
    run.manifest = Some(with_suffix(out, ".manifest.json"));
    let mut ckpt = match resume {
        Some(p) => {
            run.input(p);
            load_checkpoint(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?
        }
        None => Checkpoint::init(&resolve_config(config, overrides, seed, alpha)?)?,
    };
    run.config(config, &ckpt.config);
    let data = load_data(run, data_path)?;
    let prepared = prepare(&ckpt.config, &data)?;

    let mut remaining = max_epochs.unwrap_or(usize::MAX);
    while !ckpt.is_complete() && remaining > 0 {
        advance(&mut ckpt, &prepared, Some(1))?;
        remaining -= 1;
        if let Some(h) = ckpt.history.last() {
            eprintln!(
                "phase {} epoch {:>3}  loss {:.6}  ntxent {:.6}  pro {:.6}",
                h.phase, h.epoch, h.loss_total, h.loss_ntxent, h.loss_pro
            );
        }
    }
    save_checkpoint(out, &ckpt).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    run.output(out);

    let csv_path = loss_csv.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(out, ".losses.csv"));
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, &ckpt.history)?;
    write_atomic(&csv_path, &buf).map_err(|e| Failure::Runtime(format!("{}: {e}", csv_path.display())))?;
    run.output(&csv_path);

    println!(
        "checkpoint {} at phase {} epoch {}{}",
        out.display(),
        ckpt.phase,
        ckpt.epoch,
        if ckpt.is_complete() { " (complete)" } else { "" }
    );
    Ok(())
}

fn cmd_eval(run: &mut Run, ckpt_path: &Path, data_path: &Path, task: Task, out: &Path, on: EvalOn) -> CmdResult {
    run.manifest = Some(with_suffix(out, ".manifest.json"));
    run.input(ckpt_path);
    let ckpt = load_checkpoint(ckpt_path).map_err(|e| Failure::Runtime(format!("{}: {e}", ckpt_path.display())))?;
    let cfg = &ckpt.config;
    run.config(None, cfg);
    if !ckpt.is_complete() {
        eprintln!("note: checkpoint stopped at phase {} epoch {}", ckpt.phase, ckpt.epoch);
    }
    let data = load_data(run, data_path)?;
    let prepared = prepare(cfg, &data)?;
    let train = &prepared.split.train;
    let scored = match on {
        EvalOn::Train => train,
        EvalOn::Test => &prepared.split.test,
    };

    let mut metrics = BTreeMap::new();
    match task {
        Task::Classify => {
            let o = evaluate_classification(cfg, &ckpt.encoder, train, scored)?;
            metrics.insert("f1_macro".to_string(), o.f1_macro);
            metrics.insert("recall_macro".to_string(), o.recall_macro);
            metrics.insert("maee".to_string(), o.maee);
            println!("confusion (rows = true severity):");
            for row in o.tally.rows() {
                println!("  {}", row.iter().map(|c| format!("{c:>5}")).collect::<String>());
            }
        }
        Task::Segment => {
            let o = evaluate_segmentation(cfg, &ckpt.encoder, train, scored)?;
            metrics.insert("iou".to_string(), o.iou);
            metrics.insert("dice".to_string(), o.dice);
        }
        Task::Ordering => {
            let pairs = match on {
                EvalOn::Test => prepared.eval_pairs.clone(),
                EvalOn::Train => sample_pairs(&scored.records, cfg.eval_pairs, cfg.data_seed ^ 0xe7a1)?,
            };
            let o = evaluate_ordering(&ckpt.encoder, &ckpt.h, train, scored, &pairs)?;
            metrics.insert("spearman".to_string(), o.spearman);
            metrics.insert("pair_accuracy".to_string(), o.pair_accuracy);
        }
    }
    for (k, v) in &metrics {
        println!("{k} = {v:.6}");
    }

    let report = MetricsReport::new(task.name(), cfg, data.classes, dataset_digest(&data)?, metrics)?;
    let csv_path = with_suffix(out, ".csv");
    let json_path = with_suffix(out, ".json");
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, std::slice::from_ref(&report))?;
    write_atomic(&csv_path, &csv).map_err(|e| Failure::Runtime(format!("{}: {e}", csv_path.display())))?;
    run.output(&csv_path);
    let mut json = report.to_json()?;
    json.push('\n');
    write_atomic(&json_path, json.as_bytes())
        .map_err(|e| Failure::Runtime(format!("{}: {e}", json_path.display())))?;
    run.output(&json_path);
    Ok(())
}

fn cmd_sweep(
    run: &mut Run,
    config: Option<&Path>,
    data_path: &Path,
    alphas: &str,
    out: &Path,
    seed: Option<u64>,
    overrides: &[String],
) -> CmdResult {
    run.manifest = Some(with_suffix(out, ".manifest.json"));
    let cfg = resolve_config(config, overrides, seed, None)?;
    run.config(config, &cfg);
    let alphas = parse_alpha_spec(alphas)?;
    let data = load_data(run, data_path)?;
    let rows = alpha_sweep(&cfg, &alphas, &data)?;
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &rows)?;
    write_atomic(out, &buf).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    run.output(out);
    for r in &rows {
        println!("alpha {:<4}  f1 {:.4}  maee {:.4}  recall {:.4}", r.alpha, r.f1_macro, r.maee, r.recall_macro);
    }
    Ok(())
}

fn cmd_selfcheck(instances: usize, seed: u64, fault: Option<String>) -> CmdResult {
    if instances == 0 {
        return Err(Failure::Usage("--instances must be positive".into()));
    }
    let reports = run_selfcheck(&SelfCheckOptions { instances, seed, fault });
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<4} {:<24} {:<8} instances {:>4}  worst rel. error {:.3e}",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            format!("{:?}", r.kind).to_lowercase(),
            r.instances,
            r.worst_error
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    println!("tolerance {SELFCHECK_TOLERANCE:e}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn cmd_inspect(path: &Path) -> CmdResult {
    let bytes = std::fs::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let err = |e: SemiseError| Failure::Runtime(format!("{}: {e}", path.display()));
    if bytes.starts_with(DATASET_MAGIC) {
        let d = decode_dataset(&bytes).map_err(err)?;
        println!("dataset: {} records, {} classes, {}x{}", d.records.len(), d.classes, d.height, d.width);
        println!("class counts: {:?}", d.class_counts());
        println!("digest: {}", dataset_digest(&d)?);
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        let c = decode_checkpoint(&bytes).map_err(err)?;
        println!(
            "checkpoint: phase {} epoch {}{}",
            c.phase,
            c.epoch,
            if c.is_complete() { " (complete)" } else { "" }
        );
        println!("config hash: {}", c.config.hash());
        print!("{}", c.config.to_text());
        if let Some(h) = c.history.last() {
            println!("last epoch: phase {} epoch {} loss {}", h.phase, h.epoch, h.loss_total);
        }
    } else {
        return Err(Failure::Runtime(format!("{}: not a dataset or checkpoint file", path.display())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let start = Instant::now();
    let (run, result) = match cli.command {
        Command::Generate {
            out,
            classes,
            per_class,
            size,
            seed,
        } => {
            let mut run = Run::new("generate");
            let r = cmd_generate(&mut run, &out, classes, per_class, size, seed);
            (run, r)
        }
        Command::Train {
            config,
            data,
            out_checkpoint,
            seed,
            alpha,
            overrides,
            loss_csv,
            resume,
            max_epochs,
        } => {
            let mut run = Run::new("train");
            let r = cmd_train(
                &mut run,
                config.as_deref(),
                &data,
                &out_checkpoint,
                seed,
                alpha,
                &overrides,
                loss_csv.as_deref(),
                resume.as_deref(),
                max_epochs,
            );
            (run, r)
        }
        Command::Eval {
            checkpoint,
            data,
            task,
            out,
            on,
        } => {
            let mut run = Run::new("eval");
            let r = cmd_eval(&mut run, &checkpoint, &data, task, &out, on);
            (run, r)
        }
        Command::Sweep {
            config,
            data,
            alphas,
            out,
            seed,
            overrides,
        } => {
            let mut run = Run::new("sweep");
            let r = cmd_sweep(&mut run, config.as_deref(), &data, &alphas, &out, seed, &overrides);
            (run, r)
        }
        Command::Selfcheck {
            instances,
            seed,
            inject_fault,
        } => (Run::new("selfcheck"), cmd_selfcheck(instances, seed, inject_fault)),
        Command::Inspect { path } => (Run::new("inspect"), cmd_inspect(&path)),
    };

    let code = match &result {
        Ok(()) => 0,
        Err(f) => f.code(),
    };
    if let Err(f) = &result {
        let (Failure::Usage(m) | Failure::Runtime(m) | Failure::Check(m)) = f;
        eprintln!("error: {m}");
    }
    if let Err(m) = run.finish(code, start.elapsed().as_secs_f64()) {
        eprintln!("error: {m}");
        return ExitCode::from(1);
    }
    ExitCode::from(code)
}
