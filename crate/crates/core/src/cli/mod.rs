//! Command-line front end: `train`, `eval`, `ablate`, `stats` and `generate`.

mod config;
mod run;
#[cfg(test)]
mod tests;

pub use config::{Manifest, RunConfig, KEYS};
pub use run::{
    evaluate_split, mean_std, run_ablation, train_and_report, Ablation, AblationRow, AblationSummary,
    TrainReport, Variant,
};

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{dataset_stats, parse_statements, write_statements, Dataset, Split, VocabBuilder, SPLIT_FILES};
use crate::error::{Error, Result};
use crate::trainer::Checkpoint;
use run::{write_json, EpochWriter};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";

#[derive(Debug, Parser)]
#[command(name = "quad", version, about = "Hyper-relational knowledge graph completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoint, epoch log, metrics and manifest.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train the four component ablations over several seeds.
    Ablate(AblateArgs),
    /// Print dataset statistics as JSON.
    Stats(StatsArgs),
    /// Write the configured dataset as split files into the output directory.
    Generate(RunArgs),
}

/// Run settings. Named flags and `--set` override the config file, which
/// overrides the defaults.
#[derive(Debug, Args)]
struct RunArgs {
    /// key=value file of run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with train.txt, valid.txt and test.txt.
    #[arg(long)]
    data: Option<String>,
    /// Use the synthetic generator instead of --data.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    entities: Option<String>,
    #[arg(long)]
    relations: Option<String>,
    #[arg(long)]
    statements: Option<String>,
    #[arg(long)]
    qual_frac: Option<String>,
    #[arg(long)]
    data_seed: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    encoder_mode: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Per-epoch decay factor, or "none".
    #[arg(long)]
    lr_decay: Option<String>,
    #[arg(long, alias = "batch-size")]
    batch: Option<String>,
    #[arg(long)]
    label_smoothing: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// statement or triple.
    #[arg(long)]
    filter: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Any other setting, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        let named = [
            ("data", &self.data),
            ("entities", &self.entities),
            ("relations", &self.relations),
            ("statements", &self.statements),
            ("qual_frac", &self.qual_frac),
            ("data_seed", &self.data_seed),
            ("dim", &self.dim),
            ("encoder_mode", &self.encoder_mode),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("lr_decay", &self.lr_decay),
            ("batch_size", &self.batch),
            ("label_smoothing", &self.label_smoothing),
            ("hidden", &self.hidden),
            ("seed", &self.seed),
            ("filter", &self.filter),
            ("out", &self.out),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                c.set(key, v)?;
            }
        }
        if self.synthetic {
            c.synthetic = true;
        }
        if self.data.is_some() {
            c.synthetic = false;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Run manifest describing the data; defaults to the one beside the checkpoint.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Data directory, overriding the manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write per-query ranks as CSV (query, gold, rank).
    #[arg(long)]
    ranks: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of seeds, counting up from --seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// A statement file or a directory of split files.
    path: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on runtime or numeric failure, 2 on
/// usage, configuration or input errors.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, stdout),
        Command::Eval(a) => cmd_eval(&a, stdout),
        Command::Ablate(a) => cmd_ablate(&a, stdout),
        Command::Stats(a) => cmd_stats(&a, stdout),
        Command::Generate(a) => cmd_generate(&a, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Io { .. } | Error::Checkpoint(_) => 2,
        Error::Shape { .. } | Error::Contract(_) | Error::Numeric(_) => 1,
    }
}

fn print_json(stdout: &mut dyn Write, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    writeln!(stdout, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn prepare_run(config: &RunConfig, command: &str) -> Result<Dataset> {
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let (data, data_hash) = config.load_data()?;
    let manifest = Manifest {
        command: command.into(),
        seed: config.train.seed,
        data_hash,
        config: config.clone(),
    };
    write_json(&config.out.join(MANIFEST_FILE), &manifest)?;
    Ok(data)
}

fn cmd_train(args: &RunArgs, stdout: &mut dyn Write) -> Result<()> {
    let config = args.resolve()?;
    let data = prepare_run(&config, "train")?;
    log::info!(
        "training on {} statements ({} entities, {} relations)",
        data.train.len(),
        data.vocab.num_entities(),
        data.vocab.num_relations()
    );
    let mut epochs = EpochWriter::create(&config.out.join(EPOCH_LOG_FILE))?;
    let report = train_and_report(&config, &data, |line| {
        match line.val_mrr {
            Some(m) => log::info!("epoch {} loss {:.6} valid mrr {:.4}", line.epoch, line.loss, m),
            None => log::info!("epoch {} loss {:.6}", line.epoch, line.loss),
        }
        epochs.write(line);
    })?;
    epochs.finish()?;
    Checkpoint::new(&report.outcome.params, &config.train, &data.vocab).save(&config.out.join(CHECKPOINT_FILE))?;
    write_json(&config.out.join(METRICS_FILE), &report.metrics)?;
    print_json(stdout, &report.metrics)
}

fn cmd_eval(args: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let split: Split = args.split.parse()?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let data = match &args.data {
        Some(dir) => Dataset::load_dir(dir)?,
        None => {
            let path = match &args.manifest {
                Some(p) => p.clone(),
                None => args
                    .checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(MANIFEST_FILE),
            };
            Manifest::load(&path)?.config.load_data()?.0
        }
    };
    checkpoint.check_vocab(&data.vocab)?;
    let params = checkpoint.params()?;
    let ev = evaluate_split(&params, &data, split, checkpoint.train.filter, checkpoint.train.eval_batch)?;
    if let Some(path) = &args.ranks {
        let mut csv = String::from("query,gold,rank\n");
        for r in &ev.ranks {
            csv.push_str(&format!("{},{},{}\n", r.query, data.vocab.entity_label(r.gold), r.rank));
        }
        fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    }
    let mut metrics = vec![ev.base];
    metrics.extend(ev.qual);
    print_json(stdout, &metrics)
}

fn cmd_ablate(args: &AblateArgs, stdout: &mut dyn Write) -> Result<()> {
    let config = args.run.resolve()?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let data = prepare_run(&config, "ablate")?;
    let seeds: Vec<u64> = (0..args.seeds).map(|k| config.train.seed + k).collect();
    let ablation = run_ablation(&config, &data, &seeds, |r| {
        log::info!("{} seed {}: test mrr {:.4}", r.variant.name(), r.seed, r.mrr);
    })?;
    write_json(&config.out.join("ablation.json"), &ablation)?;
    let table = ablation.table();
    let path = config.out.join("ablation.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    write!(stdout, "{table}").map_err(|e| Error::io("<stdout>", e))
}

fn cmd_stats(args: &StatsArgs, stdout: &mut dyn Write) -> Result<()> {
    let stats = if args.path.is_dir() {
        let data = Dataset::load_dir(&args.path)?;
        dataset_stats(data.all())
    } else {
        let mut vocab = VocabBuilder::new();
        let statements = parse_statements(&args.path, &mut vocab)?;
        dataset_stats(&statements)
    };
    print_json(stdout, &stats)
}

fn cmd_generate(args: &RunArgs, stdout: &mut dyn Write) -> Result<()> {
    let config = args.resolve()?;
    let data = prepare_run(&config, "generate")?;
    for (name, split) in SPLIT_FILES.iter().zip([&data.train, &data.valid, &data.test]) {
        write_statements(&config.out.join(name), split, &data.vocab)?;
    }
    print_json(stdout, &dataset_stats(data.all()))
}
