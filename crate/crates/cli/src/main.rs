use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use morphforge_cli::commands::{cmd_attack, cmd_dataset, cmd_eval, cmd_inspect, cmd_lrp, cmd_morph, cmd_synth, cmd_train};
use morphforge_cli::{CliError, JobConfig};

#[derive(Parser)]
#[command(name = "morphforge", version, about = "Face morph generation and morph detector experiments")]
struct Cli {
    /// JSON job configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override a config field, e.g. `--set dataset.regime=multiclass`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render procedural faces with landmarks and a manifest.
    Synth,
    /// Render morphs or partial morphs for the pairs in `morph.pairs`.
    Morph,
    /// Split, pair and build the sample lists.
    Dataset,
    /// Train the detector.
    Train,
    /// Evaluate the detector on the test benchmark.
    Eval,
    /// Black-box (and white-box) FGSM robustness curves.
    Attack,
    /// Relevance maps and per-region relevance fractions.
    Lrp,
    /// Summarize a manifest, sample list or model file.
    Inspect { path: PathBuf },
    /// Print the effective configuration.
    Config,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    if let Some(s) = cli.seed {
        out.push(("seed".into(), s.to_string()));
    }
    if let Some(w) = cli.workers {
        out.push(("workers".into(), w.to_string()));
    }
    if let Some(d) = &cli.out_dir {
        out.push(("out_dir".into(), serde_json::to_string(d).expect("path serializes")));
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = JobConfig::load(cli.config.as_deref(), &overrides(cli)?)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .context("starting worker pool")?;
    let report = |v: serde_json::Value| println!("{}", serde_json::to_string_pretty(&v).expect("json"));
    match &cli.command {
        Command::Synth => {
            let manifest = cmd_synth(&cfg)?;
            report(serde_json::json!({ "manifest": manifest }));
        }
        Command::Morph => report(serde_json::to_value(cmd_morph(&cfg)?)?),
        Command::Dataset => report(serde_json::to_value(cmd_dataset(&cfg)?)?),
        Command::Train => report(serde_json::to_value(cmd_train(&cfg)?)?),
        Command::Eval => {
            let s = cmd_eval(&cfg)?;
            report(serde_json::json!({
                "true_positive_rate": s.report.true_positive_rate,
                "true_negative_rate": s.report.true_negative_rate,
                "eer": s.report.eer,
                "complete_accuracy": s.complete_accuracy,
                "groups": s.groups,
            }));
        }
        Command::Attack => report(serde_json::to_value(cmd_attack(&cfg)?)?),
        Command::Lrp => report(serde_json::to_value(cmd_lrp(&cfg)?)?),
        Command::Inspect { path } => report(cmd_inspect(path)?),
        Command::Config => print!("{}", cfg.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = match e.downcast::<CliError>() {
                Ok(c) => c,
                Err(other) => CliError::data(format!("{other:#}")),
            };
            eprintln!("{}", err.to_json());
            ExitCode::from(err.kind.exit_code() as u8)
        }
    }
}
