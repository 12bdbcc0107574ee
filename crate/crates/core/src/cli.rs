//! Command-line front end.
//!
//! One process per run. Every command resolves an [`ExperimentConfig`] from
//! `--config` (a JSON file, optionally naming a preset) or `--preset`, then
//! applies `--seed`. Errors map onto exit codes: 1 for configuration
//! problems (including bad flags), 2 for data and IO problems, 3 when
//! training diverges.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablation::{run_ablation, AblationAxis};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, SplitMode};
use crate::data::{
    generate_synthetic, load_splits, read_split_raw, split_dataset, write_dataset_dir, ChannelStats, SplitKind,
    TimeSeriesDataset,
};
use crate::error::{Error, Result};
use crate::eval::{
    export_embeddings, finetune_semisupervised, linear_evaluate, refresh_results_table, run_random_init_baseline,
    run_supervised_baseline, EvalReport,
};
use crate::nn::DualNetworkState;
use crate::trainer::{pretrain, PretrainOptions};

pub const THREADS_ENV: &str = "FREQBOOT_NUM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "freqboot", version, about = "Low/high-frequency feature bootstrapping for time series")]
pub struct Cli {
    /// Log progress to stderr (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised pretraining; writes train_log.csv, last.ckpt, best.ckpt.
    Pretrain(Common),
    /// Linear evaluation, semi-supervised fine-tuning or a baseline.
    Eval(EvalArgs),
    /// Run one ablation grid and write its comparison table.
    Ablate(AblateArgs),
    /// Generate the synthetic dataset as a dataset directory.
    SynthGen(Common),
    /// Write frozen encoder representations of the test split as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON configuration file. May name a preset under "preset".
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Built-in preset, used when no config file is given.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Dataset directory. Optional for the synthetic dataset, which is
    /// generated in memory when absent.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Byte-identical outputs across reruns (wallclock is logged as 0).
    #[arg(long)]
    pub strict_determinism: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Supervised,
    Random,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pretrained checkpoint (required for --linear and --semi).
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Linear probe on the frozen pretrained encoder.
    #[arg(long, group = "protocol")]
    pub linear: bool,
    /// Fine-tune the pretrained model on a labeled fraction.
    #[arg(long, group = "protocol", requires = "fraction")]
    pub semi: bool,
    /// Supervised training from scratch or a frozen random-init probe.
    #[arg(long, group = "protocol", value_enum)]
    pub baseline: Option<Baseline>,
    /// Label fraction for --semi and --baseline supervised.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// heads, augmentation, kernel or lambda.
    #[arg(long)]
    pub axis: String,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Destination CSV file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

/// Parse `args` (program name first), run the command, and return the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    if n == 0 {
        return Err(Error::Config(format!("{THREADS_ENV} must be >= 1")));
    }
    // a second call in the same process (tests) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(c) => cmd_pretrain(&c),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::SynthGen(c) => cmd_synth_gen(&c),
        Command::ExportEmbeddings(a) => cmd_export(&a),
    }
}

fn resolve_config(config: Option<&Path>, preset: Option<&str>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match (config, preset) {
        (Some(path), _) => ExperimentConfig::from_file(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => return Err(Error::Config("either --config or --preset is required".into())),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.ablation.seeds = vec![s];
    }
    Ok(cfg)
}

fn normalize(mut parts: [TimeSeriesDataset; 3]) -> Result<[TimeSeriesDataset; 3]> {
    let stats = ChannelStats::fit(&parts[0]);
    for p in parts.iter_mut() {
        stats.apply(p)?;
    }
    Ok(parts)
}

/// Train, validation and test splits, z-scored with train statistics.
pub fn resolve_splits(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<[TimeSeriesDataset; 3]> {
    match (data, cfg.split_mode) {
        (Some(dir), SplitMode::Published) => load_splits(dir),
        (Some(dir), SplitMode::Resplit) => {
            let raw: Vec<TimeSeriesDataset> = ["train", "val", "test"]
                .iter()
                .map(|s| read_split_raw(dir, s))
                .collect::<Result<_>>()?;
            let pooled = TimeSeriesDataset::concat(&raw.iter().filter(|d| !d.is_empty()).collect::<Vec<_>>())?;
            let (tr, va, te) = split_dataset(&pooled, &cfg.split)?;
            normalize([tr, va, te])
        }
        (None, _) if cfg.dataset == "synthetic" => {
            let (tr, va, te) = split_dataset(&generate_synthetic(&cfg.synthetic, cfg.split.seed)?, &cfg.split)?;
            normalize([tr, va, te])
        }
        (None, _) => Err(Error::Config(format!("--data is required for dataset '{}'", cfg.dataset))),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let mut v = serde_json::to_value(cfg)?;
    v["config_hash"] = cfg.hash().into();
    let path = dir.join("config.json");
    crate::checkpoint::write_atomic(&path, serde_json::to_string_pretty(&v)?.as_bytes())
}

fn cmd_pretrain(c: &Common) -> Result<()> {
    let cfg = resolve_config(c.config.as_deref(), c.preset.as_deref(), c.seed)?;
    let [train, _, _] = resolve_splits(&cfg, c.data.as_deref())?;
    create_out(&c.out)?;
    write_config(&cfg, &c.out)?;
    let opts = PretrainOptions {
        out_dir: Some(c.out.clone()),
        strict_determinism: c.strict_determinism,
    };
    let out = pretrain(&cfg, &train, &opts)?;
    println!(
        "pretrained {} epochs ({} steps) on {} samples; final epoch loss {:.5}; config {}",
        cfg.train.epochs,
        out.optimizer_steps,
        train.len(),
        out.epoch_means.last().copied().unwrap_or(f64::NAN),
        cfg.hash()
    );
    if let Some(p) = &out.last_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn load_state(path: &Path) -> Result<(Checkpoint, DualNetworkState)> {
    let ckpt = Checkpoint::load(path)?;
    let state = ckpt.clone().into_state()?;
    Ok((ckpt, state))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let c = &a.common;
    let mut cfg = resolve_config(c.config.as_deref(), c.preset.as_deref(), c.seed)?;
    if !(a.linear || a.semi || a.baseline.is_some()) {
        return Err(Error::Config("choose one protocol: --linear, --semi or --baseline".into()));
    }
    if a.fraction.is_some() && (a.linear || a.baseline == Some(Baseline::Random)) {
        return Err(Error::Config("--fraction applies only to --semi and --baseline supervised".into()));
    }
    let seed = cfg.train.seed;
    let needs_ckpt = a.linear || a.semi;
    let loaded = match (&a.checkpoint, needs_ckpt) {
        (Some(p), true) => Some(load_state(p)?),
        (None, true) => return Err(Error::Config("--checkpoint is required for --linear and --semi".into())),
        (_, false) => None,
    };
    if let Some((ckpt, _)) = &loaded {
        // the architecture comes from the checkpoint; keep the user's
        // downstream settings
        cfg.train = ckpt.config.train.clone();
        cfg.train.seed = seed;
    }
    let [train, _, test] = resolve_splits(&cfg, c.data.as_deref())?;
    let mut report: EvalReport = match (&loaded, a.baseline) {
        (Some((_, st)), _) if a.linear => linear_evaluate(st, &train, &test, &cfg, seed)?,
        (Some((_, st)), _) => finetune_semisupervised(st, &train, &test, &cfg, a.fraction.unwrap_or(1.0), seed)?,
        (None, Some(Baseline::Supervised)) => {
            run_supervised_baseline(&train, &test, &cfg, a.fraction.unwrap_or(1.0), seed)?
        }
        (None, Some(Baseline::Random)) => run_random_init_baseline(&train, &test, &cfg, seed)?,
        (None, None) => unreachable!("protocol checked above"),
    };
    if let Some((ckpt, _)) = &loaded {
        report.checkpoint_config_hash = Some(ckpt.config_hash());
    }
    create_out(&c.out)?;
    let path = report.save(&c.out)?;
    let table = refresh_results_table(&c.out)?;
    println!(
        "{} fraction {}: accuracy {:.4} macro-F1 {:.4}",
        report.protocol.as_str(),
        report.label_fraction,
        report.accuracy,
        report.macro_f1
    );
    for w in &report.warnings {
        println!("warning: {w}");
    }
    println!("report: {}\ntable: {}", path.display(), table.display());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let c = &a.common;
    let axis: AblationAxis = a.axis.parse()?;
    let cfg = resolve_config(c.config.as_deref(), c.preset.as_deref(), c.seed)?;
    let [train, _, test] = resolve_splits(&cfg, c.data.as_deref())?;
    create_out(&c.out)?;
    write_config(&cfg, &c.out)?;
    let result = run_ablation(&cfg, axis, &train, &test, Some(&c.out), c.strict_determinism)?;
    println!("{:<28} {:>14} {:>14}", "variant", "ACC", "MF1");
    for row in &result.rows {
        println!("{:<28} {:>14} {:>14}", row.label, row.acc, row.mf1);
    }
    if let Some(p) = &result.table {
        println!("table: {}", p.display());
    }
    Ok(())
}

fn cmd_synth_gen(c: &Common) -> Result<()> {
    if c.data.is_some() {
        return Err(Error::Config("synth-gen writes a dataset; use --out, not --data".into()));
    }
    let mut cfg = resolve_config(c.config.as_deref(), c.preset.as_deref(), None)?;
    if let Some(s) = c.seed {
        cfg.split.seed = s;
    }
    let ds = generate_synthetic(&cfg.synthetic, cfg.split.seed)?;
    let (tr, va, te) = split_dataset(&ds, &cfg.split)?;
    let meta = write_dataset_dir(&c.out, &[(SplitKind::Train, &tr), (SplitKind::Val, &va), (SplitKind::Test, &te)])?;
    println!(
        "wrote {} ({} channels x {} steps, {} classes): train {} / val {} / test {}",
        c.out.display(),
        meta.channels,
        meta.length,
        meta.num_classes,
        tr.len(),
        va.len(),
        te.len()
    );
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let (ckpt, state) = load_state(&a.checkpoint)?;
    let cfg = match &a.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ckpt.config.clone(),
    };
    let [_, _, test] = resolve_splits(&cfg, a.data.as_deref())?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    let dim = export_embeddings(&state, &test, &a.out)?;
    println!("wrote {} rows x {dim} dims to {}", test.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> i32 {
        run(std::iter::once("freqboot").chain(args.iter().copied()))
    }

    #[test]
    fn flag_errors_are_configuration_errors() {
        assert_eq!(code(&["pretrain", "--out", "x", "--no-such-flag"]), 1);
        assert_eq!(code(&["frobnicate"]), 1);
        assert_eq!(code(&["eval", "--preset", "synthetic", "--out", "x", "--linear", "--semi", "--fraction", "0.1"]), 1);
        assert_eq!(code(&["--help"]), 0);
    }

    #[test]
    fn seed_override_reaches_train_and_ablation() {
        let cfg = resolve_config(None, Some("synthetic"), Some(7)).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.ablation.seeds, vec![7]);
        assert!(matches!(resolve_config(None, None, None), Err(Error::Config(_))));
    }

    #[test]
    fn in_memory_synthetic_matches_generated_directory() {
        let cfg = ExperimentConfig::from_value(serde_json::json!({
            "preset": "synthetic",
            "split_mode": "published",
            "synthetic": { "n_per_class": 10, "length": 96 }
        }))
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&cfg.synthetic, cfg.split.seed).unwrap();
        let (tr, va, te) = split_dataset(&ds, &cfg.split).unwrap();
        write_dataset_dir(dir.path(), &[(SplitKind::Train, &tr), (SplitKind::Val, &va), (SplitKind::Test, &te)])
            .unwrap();
        let a = resolve_splits(&cfg, None).unwrap();
        let b = resolve_splits(&cfg, Some(dir.path())).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.samples, y.samples);
            assert_eq!(x.split, y.split);
        }
    }
}
