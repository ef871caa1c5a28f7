use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xmixup::analysis::{discrepancy_report, write_report};
use xmixup::corpus::{gen_bundle, load_jsonl, save_jsonl, DatasetBundle};
use xmixup::gradsuite::{run_suite, DEFAULT_SEEDS, SUITE_TOLERANCE};
use xmixup::pipeline::{
    ablate, evaluate, load_checkpoint, metrics_csv, save_checkpoint, sweep_layer, train, Checkpoint, EvalReport,
    EpochMetrics,
};
use xmixup::runconfig::{parse_entries, RunConfig};

/// Cross-lingual manifold mixup on toy parallel data.
#[derive(Parser, Debug)]
#[command(name = "xmixup", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic parallel bundle as JSONL.
    GenData(Common),
    /// Train one model and write metrics and a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the test split of a bundle.
    Eval(Common),
    /// Write CKA, centroid and PCA tables for a checkpoint.
    Analyze(Common),
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
    },
    /// Train once per mix layer plus a translate-train baseline.
    SweepLayer {
        #[command(flatten)]
        common: Common,
        /// Comma-separated 1-based layers; defaults to every layer.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
    /// Train every ablation variant.
    Ablate(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mix_layer: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    schedule_k: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    /// Plain translate-train: no mixing in training or inference.
    #[arg(long)]
    no_mixup: bool,
    #[arg(long)]
    no_mixup_inference: bool,
    #[arg(long)]
    no_scheduled_sampling: bool,
    #[arg(long)]
    no_mse: bool,
    #[arg(long)]
    no_kl: bool,
    /// Fix the mixup ratio at lambda0.
    #[arg(long)]
    constant_lambda: bool,
    /// Compute the MSE term against an unmixed target pass.
    #[arg(long)]
    mse_unmixed: bool,
}

impl Common {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| o.push((k.to_string(), v));
        if let Some(v) = &self.task {
            put("task", v.clone());
        }
        if let Some(v) = self.seed {
            put("seed", v.to_string());
        }
        if let Some(v) = self.epochs {
            put("epochs", v.to_string());
        }
        if let Some(v) = self.mix_layer {
            put("mixup.mix_layer", v.to_string());
        }
        if let Some(v) = self.alpha {
            put("alpha", v.to_string());
        }
        if let Some(v) = self.schedule_k {
            put("mixup.schedule_k", v.to_string());
        }
        if let Some(v) = self.lambda0 {
            put("mixup.lambda0", v.to_string());
        }
        for (flag, key) in [
            (self.no_mixup, "toggles.use_mixup"),
            (self.no_mixup, "toggles.mixup_inference"),
            (self.no_mixup_inference, "toggles.mixup_inference"),
            (self.no_scheduled_sampling, "toggles.scheduled_sampling"),
            (self.no_mse, "toggles.mse_consistency"),
            (self.no_kl, "toggles.kl_consistency"),
            (self.mse_unmixed, "toggles.mse_on_mixed"),
        ] {
            if flag {
                put(key, "false".into());
            }
        }
        if self.constant_lambda {
            put("toggles.constant_lambda", "true".into());
        }
        if let Some(p) = &self.out {
            put("paths.out", p.display().to_string());
        }
        if let Some(p) = &self.data {
            put("paths.data", p.display().to_string());
        }
        if let Some(p) = &self.checkpoint {
            put("paths.checkpoint", p.display().to_string());
        }
        o
    }

    fn resolve(&self) -> Result<RunConfig> {
        let entries = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_entries(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => vec![],
        };
        let config = RunConfig::resolve(&entries, &self.overrides())?;
        Ok(config)
    }
}

fn out_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.paths.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Starts `run.log` with the subcommand and the resolved config.
fn start_log(dir: &Path, command: &str, config: &RunConfig) -> Result<String> {
    let mut log = format!("command = {command}\n");
    log.push_str(&config.to_text());
    log::debug!("resolved config:\n{}", config.to_text());
    write(&dir.join("run.log"), &log)?;
    Ok(log)
}

fn load_or_generate(config: &RunConfig) -> Result<DatasetBundle> {
    let bundle = match &config.paths.data {
        Some(p) => load_jsonl(p).with_context(|| format!("loading {}", p.display()))?,
        None => gen_bundle(config.train.task, config.sizes(), &config.language()?, config.train.seed)?,
    };
    if bundle.task != config.train.task {
        bail!("data holds {} examples but the config trains {}", bundle.task, config.train.task);
    }
    Ok(bundle)
}

fn report_line(r: &EvalReport) -> String {
    let mut s = format!("task = {}\ncount = {}\nmetric = {}\n", r.task, r.count, r.metric);
    for (k, v) in [("accuracy", r.accuracy), ("f1", r.f1), ("exact_match", r.exact_match)] {
        if let Some(v) = v {
            let _ = writeln!(s, "{k} = {v}");
        }
    }
    s
}

fn cmd_gen_data(c: &Common) -> Result<()> {
    let config = c.resolve()?;
    let dir = out_dir(&config)?;
    start_log(&dir, "gen-data", &config)?;
    let bundle = gen_bundle(config.train.task, config.sizes(), &config.language()?, config.train.seed)?;
    let path = dir.join("bundle.jsonl");
    save_jsonl(&bundle, &path)?;
    println!("wrote {} train / {} test examples to {}", bundle.train.len(), bundle.test.len(), path.display());
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let config = c.resolve()?;
    let dir = out_dir(&config)?;
    let mut log = start_log(&dir, "train", &config)?;
    let bundle = load_or_generate(&config)?;
    let out = train(&config.train, &bundle, "train")?;
    write(&dir.join("metrics.csv"), &metrics_csv(&out.metrics))?;
    let ckpt = config.paths.checkpoint.clone().unwrap_or_else(|| dir.join("checkpoint.json"));
    save_checkpoint(&ckpt, &Checkpoint::from_output(&out))?;
    if !bundle.test.is_empty() {
        let r = evaluate(&out.model, &bundle.test)?;
        log.push_str(&report_line(&r));
        println!("{} = {:.4}", r.task.as_str(), r.metric);
    }
    write(&dir.join("run.log"), &log)?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn checkpoint_and_data(c: &Common) -> Result<(Checkpoint, DatasetBundle, RunConfig)> {
    let mut config = c.resolve()?;
    let Some(path) = config.paths.checkpoint.clone() else {
        bail!("--checkpoint is required");
    };
    let ckpt = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    config.train = ckpt.config.clone();
    let bundle = load_or_generate(&config)?;
    Ok((ckpt, bundle, config))
}

fn cmd_eval(c: &Common) -> Result<()> {
    let (ckpt, bundle, config) = checkpoint_and_data(c)?;
    if bundle.test.is_empty() {
        bail!("the bundle has no test examples");
    }
    let r = evaluate(&ckpt.model(), &bundle.test)?;
    let text = report_line(&r);
    if c.out.is_some() {
        let dir = out_dir(&config)?;
        let mut log = start_log(&dir, "eval", &config)?;
        log.push_str(&text);
        write(&dir.join("run.log"), &log)?;
        write(&dir.join("eval.json"), &serde_json::to_string_pretty(&r)?)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_analyze(c: &Common) -> Result<()> {
    let (ckpt, bundle, config) = checkpoint_and_data(c)?;
    let dir = out_dir(&config)?;
    start_log(&dir, "analyze", &config)?;
    let examples = if bundle.test.is_empty() { &bundle.train } else { &bundle.test };
    let report = discrepancy_report(&ckpt.model(), examples)?;
    write_report(&report, &dir)?;
    for r in report.cka.iter().filter(|r| r.lang_a < r.lang_b) {
        println!("cka[{}] {} / {} = {:.4}", r.variant, r.lang_a, r.lang_b, r.cka);
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, seeds: usize) -> Result<bool> {
    let report = run_suite(seed, seeds)?;
    let worst = report.worst().context("empty gradient suite")?;
    println!(
        "max relative error {:e} ({} checks, worst: {} seed {})",
        report.max_rel_err(),
        report.cases.len(),
        worst.name,
        worst.seed
    );
    Ok(report.passed())
}

fn all_metrics<'a>(rows: impl Iterator<Item = &'a Vec<EpochMetrics>>) -> String {
    let all: Vec<EpochMetrics> = rows.flatten().cloned().collect();
    metrics_csv(&all)
}

fn cmd_sweep(c: &Common, layers: &[usize]) -> Result<()> {
    let config = c.resolve()?;
    let dir = out_dir(&config)?;
    start_log(&dir, "sweep-layer", &config)?;
    let bundle = load_or_generate(&config)?;
    let layers: Vec<usize> = if layers.is_empty() {
        (1..=config.train.encoder.num_layers).collect()
    } else {
        layers.to_vec()
    };
    let rows = sweep_layer(&config.train, &layers, &bundle)?;
    write(&dir.join("metrics.csv"), &all_metrics(rows.iter().map(|r| &r.metrics)))?;
    let mut table = String::from("mix_layer,run_id,metric\n");
    for r in &rows {
        let layer = r.mix_layer.map(|l| l.to_string()).unwrap_or_else(|| "none".into());
        let _ = writeln!(table, "{layer},{},{}", r.run_id, r.eval.metric);
        println!("{:<10} {:.4}", r.run_id, r.eval.metric);
    }
    write(&dir.join("sweep.csv"), &table)
}

fn cmd_ablate(c: &Common) -> Result<()> {
    let config = c.resolve()?;
    let dir = out_dir(&config)?;
    start_log(&dir, "ablate", &config)?;
    let bundle = load_or_generate(&config)?;
    let rows = ablate(&config.train, &bundle)?;
    write(&dir.join("metrics.csv"), &all_metrics(rows.iter().map(|r| &r.metrics)))?;
    let mut table = String::from("name,run_id,metric\n");
    for r in &rows {
        let _ = writeln!(table, "{},{},{}", r.name, r.run_id, r.eval.metric);
        println!("{:<24} {:.4}", r.name, r.eval.metric);
    }
    write(&dir.join("ablation.csv"), &table)
}

fn init_logging() {
    let level = match std::env::var("X_MIXUP_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let result = match &cli.command {
        Command::GenData(c) => cmd_gen_data(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Analyze(c) => cmd_analyze(c),
        Command::Gradcheck { seed, seeds } => match cmd_gradcheck(*seed, *seeds) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check exceeded {SUITE_TOLERANCE:e}");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::SweepLayer { common, layers } => cmd_sweep(common, layers),
        Command::Ablate(c) => cmd_ablate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
