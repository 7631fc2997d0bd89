//! `peft-forge`: generate synthetic data, pretrain a base or a domain
//! adapter, fine-tune the six stacking variants, sweep hyperparameters,
//! evaluate and merge.

mod commands;
mod settings;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use settings::Settings;

#[derive(Parser, Debug)]
#[command(
    name = "peft-forge",
    version,
    about = "Two-step PEFT pipeline over a toy LLaMA-style model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for data generation, initialisation and training order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration file (or a run manifest to replay).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created when missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Configuration override `section.key=value`; wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpora, vocabulary and five task datasets.
    Gen,
    /// Train a base model (`--peft none`) or a domain adapter on a corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune one stacking variant on one task or all five.
    Finetune(FinetuneArgs),
    /// Bayesian search over a technique's hyperparameter grid.
    Hpo(HpoArgs),
    /// Perplexity of a base (plus adapter) or AUROC of a saved stack.
    Eval(EvalArgs),
    /// Fold LoRA weights into the base.
    Merge(MergeArgs),
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Corpus file, one document per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Starting base checkpoint; a fresh model when absent.
    #[arg(long)]
    base: Option<PathBuf>,
    /// none, lora, prefix, prompt, ptuning or adaption.
    #[arg(long, default_value = "lora")]
    peft: String,
    /// Vocabulary file; the built-in synthetic vocabulary when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    base: PathBuf,
    /// head_only, lora_only, domain_frozen, domain_frozen_plus_downstream,
    /// domain_trainable or domain_trainable_plus_downstream.
    #[arg(long)]
    variant: String,
    /// pmv, mor, los, diag, proc or all.
    #[arg(long)]
    task: String,
    /// Dataset file, or a directory holding `<task>.jsonl`.
    #[arg(long)]
    data: PathBuf,
    /// Domain adapter checkpoint, for the domain_* variants.
    #[arg(long)]
    domain_adapter: Option<PathBuf>,
    /// Evaluate a saved stack on the test split instead of training.
    #[arg(long)]
    eval_only: bool,
    /// Stack file (one task) or directory of `stack-<task>.peft` for --eval-only.
    #[arg(long)]
    stack: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HpoStage {
    Pretrain,
    Finetune,
}

#[derive(Args, Debug)]
pub struct HpoArgs {
    #[arg(long, value_enum)]
    stage: HpoStage,
    /// Technique to sweep; the fine-tuning stage accepts only lora.
    #[arg(long, default_value = "lora")]
    peft: String,
    /// Trial budget, at most 20.
    #[arg(long)]
    budget: Option<usize>,
    /// Base checkpoint; a fresh model when absent (pretrain stage only).
    #[arg(long)]
    base: Option<PathBuf>,
    /// Corpus for the pretrain stage.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Dataset for the fine-tuning stage.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// Variant for the fine-tuning stage; it must have a downstream slot.
    #[arg(long, default_value = "lora_only")]
    variant: String,
    #[arg(long)]
    domain_adapter: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    base: PathBuf,
    /// Adapter for perplexity evaluation.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Corpus whose held-out split is scored.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Stack file or directory for AUROC evaluation.
    #[arg(long)]
    stack: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long)]
    base: PathBuf,
    /// LoRA adapter checkpoint.
    #[arg(long, conflicts_with = "stack")]
    adapter: Option<PathBuf>,
    /// Stack whose LoRA slots are folded in; the rest is written back.
    #[arg(long)]
    stack: Option<PathBuf>,
}

/// Error with its exit code: 1 usage, 2 data, 3 numeric or training.
#[derive(Debug)]
pub struct Fail {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Fail {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: e.into(),
        }
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: e.into(),
        }
    }
}

impl From<peft_forge::Error> for Fail {
    fn from(e: peft_forge::Error) -> Self {
        use peft_forge::error::Error as E;
        use peft_forge::metrics::MetricError;
        let code = match &e {
            E::Config(_)
            | E::MissingAdapter { .. }
            | E::UnexpectedAdapter { .. }
            | E::NotMergeable(_)
            | E::UntargetedProjection(_) => 1,
            E::Tensor(_) | E::Training(_) | E::Search(_) | E::Metric(MetricError::NonFinite) => 3,
            _ => 2,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Fail {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<peft_forge::Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Self::data(e),
        }
    }
}

pub type CmdResult<T> = Result<T, Fail>;

/// Record of one invocation, written as `manifest.json` in the output
/// directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: Settings,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub status: String,
    pub metrics: Value,
}

/// What a command hands back for the manifest.
#[derive(Default)]
pub struct Outcome {
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub metrics: Value,
}

impl Outcome {
    pub fn input(&mut self, key: &str, path: &Path) {
        self.inputs
            .insert(key.to_string(), path.display().to_string());
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn set_threads() -> Result<(), Fail> {
    let Ok(raw) = std::env::var("PEFT_FORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Fail::usage(anyhow::anyhow!(
            "PEFT_FORGE_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Fail::usage(anyhow::anyhow!(e)))
}

fn run(cli: Cli, args: Vec<String>) -> Result<(), Fail> {
    set_threads()?;
    let out = cli
        .common
        .out
        .clone()
        .ok_or_else(|| Fail::usage(anyhow::anyhow!("--out is required")))?;
    let settings = Settings::resolve(
        cli.common.config.as_deref(),
        &cli.common.sets,
        cli.common.seed,
    )?;
    std::fs::create_dir_all(&out).map_err(|e| {
        Fail::data(anyhow::anyhow!(
            "cannot create output directory {}: {e}",
            out.display()
        ))
    })?;
    let name = match &cli.command {
        Command::Gen => "gen",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::Hpo(_) => "hpo",
        Command::Eval(_) => "eval",
        Command::Merge(_) => "merge",
    };
    let started = unix_now();
    let result = match &cli.command {
        Command::Gen => commands::gen(&settings, &out),
        Command::Pretrain(a) => commands::pretrain(&settings, a, &out),
        Command::Finetune(a) => commands::finetune(&settings, a, &out),
        Command::Hpo(a) => commands::hpo(&settings, a, &out),
        Command::Eval(a) => commands::eval(&settings, a, &out),
        Command::Merge(a) => commands::merge(&settings, a, &out),
    };
    let (status, outcome) = match &result {
        Ok(_) => ("ok".to_string(), None),
        Err(f) => (
            format!("error (exit {}): {:#}", f.code, f.error),
            Some(Outcome::default()),
        ),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(f) => {
            write_manifest(
                &out,
                name,
                args,
                &settings,
                outcome.unwrap_or_default(),
                started,
                status,
            );
            return Err(f);
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&outcome.metrics).expect("metrics serialize")
    );
    write_manifest(&out, name, args, &settings, outcome, started, status);
    Ok(())
}

fn write_manifest(
    out: &Path,
    command: &str,
    args: Vec<String>,
    settings: &Settings,
    outcome: Outcome,
    started: f64,
    status: String,
) {
    let m = RunManifest {
        command: command.into(),
        args,
        seed: settings.seed,
        config: settings.clone(),
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        started_unix: started,
        finished_unix: unix_now(),
        status,
        metrics: outcome.metrics,
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    if let Err(e) = std::fs::write(out.join("manifest.json"), text + "\n") {
        eprintln!("warning: could not write manifest: {e}");
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, args[1..].to_vec()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
