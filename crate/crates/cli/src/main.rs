use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maf_core::experiments::{self, DataSource, ExperimentConfig, ExperimentError, RunRecord};
use maf_core::model::Variant;
use maf_core::synthetic::SyntheticSpec;

#[derive(Parser)]
#[command(
    name = "maf",
    version,
    about = "Train and compare fusion adapters in a small encoder-decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the configured seed list with this one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restricts to these variants (repeatable).
    #[arg(long)]
    variant: Vec<Variant>,
    /// Uses this JSONL corpus instead of the configured data source.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes a checkpoint, losses and test scores.
    Train(Common),
    /// Score a checkpoint on the configured test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and score every configured variant under every seed.
    Ablate(Common),
    /// Move the fusion block through each encoder layer.
    SweepFusionLayer(Common),
    /// Write a synthetic corpus as JSONL.
    GenSynthetic {
        /// Synthetic spec (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus statistics for a JSONL dataset.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Aggregate the runs in a directory into report.txt and report.csv.
    Report {
        /// Run directory (the `out_dir` of an ablation or sweep).
        dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if !common.variant.is_empty() {
        cfg.variants = common.variant.clone();
    }
    if let Some(path) = &common.dataset {
        let split_seed = match &cfg.data {
            DataSource::Dataset { split_seed, .. } => *split_seed,
            DataSource::Synthetic { .. } => 1,
        };
        cfg.data = DataSource::Dataset {
            path: path.clone(),
            split_seed,
        };
    }
    Ok(cfg)
}

fn progress(r: &RunRecord) {
    eprintln!(
        "{:<10} seed {:<3} action {:6.2}  target {:6.2}  exact {:6.2}  R1 {:6.2}",
        r.label,
        r.seed,
        r.outcome.action_acc,
        r.outcome.target_acc,
        r.outcome.exact_match,
        r.outcome.scores.r1
    );
}

fn report_dir(dir: Option<PathBuf>, out: Option<PathBuf>) -> Result<PathBuf, ExperimentError> {
    dir.or(out)
        .ok_or_else(|| ExperimentError::Config("report needs a run directory".into()))
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common)?;
            let r = experiments::cmd_train(&cfg)?;
            progress(&r);
            println!("{}", cfg.out_dir.join("checkpoint.json").display());
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load(&common)?;
            let o = experiments::cmd_evaluate(&cfg, &checkpoint)?;
            println!(
                "action {:.2}  target {:.2}  exact {:.2}  R1 {:.2}  RL {:.2}  B4 {:.2}",
                o.action_acc, o.target_acc, o.exact_match, o.scores.r1, o.scores.rl, o.scores.b4
            );
        }
        Command::Ablate(common) => {
            let cfg = load(&common)?;
            print!("{}", experiments::cmd_ablate(&cfg, progress)?.text);
        }
        Command::SweepFusionLayer(common) => {
            let cfg = load(&common)?;
            print!(
                "{}",
                experiments::cmd_sweep_fusion_layer(&cfg, progress)?.text
            );
        }
        Command::GenSynthetic { config, seed, out } => {
            let mut spec = match config {
                Some(p) => read_spec(&p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let n = experiments::cmd_gen_synthetic(&spec, &out)?;
            eprintln!("wrote {n} instances to {}", out.display());
        }
        Command::Stats { dataset, json } => {
            let stats = experiments::cmd_stats(&dataset)?;
            if json {
                println!("{}", stats.to_json());
            } else {
                print!("{stats}");
            }
        }
        Command::Report { dir, out } => {
            let dir = report_dir(dir, out)?;
            print!("{}", experiments::write_report(&dir)?.text);
        }
    }
    Ok(())
}

fn read_spec(path: &Path) -> Result<SyntheticSpec, ExperimentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
    SyntheticSpec::from_json(&text).map_err(|e| ExperimentError::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
