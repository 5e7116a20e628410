use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mgt_cli::{
    cmd_ablate, cmd_generate, cmd_interpret, cmd_train, parse_target, InterpretRequest,
    Overrides, RunConfig, SubjectSet,
};
use mgt_core::interpret::SaliencyOptions;
use mgt_core::{FusionKind, Modality};

/// Multimodal imaging-genomics classifier: synthetic cohorts, cross-validated training,
/// the modality/fusion ablation grid, and saliency export.
#[derive(Parser)]
#[command(name = "mgt", version)]
struct Cli {
    /// JSON run configuration; flags override it, it overrides built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for cohort generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-signal cohort.
    Generate {
        /// Number of subjects.
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Cross-validated training of one configuration.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        /// Modality set, e.g. `G,C,S` or `GC`.
        #[arg(long, value_parser = parse_modalities)]
        modalities: Option<ModalitySet>,
        /// none, concat, aff or trans.
        #[arg(long)]
        fusion: Option<FusionKind>,
    },
    /// Run the nine-row modality/fusion grid on shared fold splits.
    Ablate {
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Saliency for a trained fold checkpoint.
    Interpret {
        /// Fold checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cohort directory (defaults to the configured cohort).
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        top_snps: usize,
        #[arg(long, default_value_t = 5)]
        top_connections: usize,
        /// Also compute volume attention maps.
        #[arg(long)]
        volume_maps: bool,
        /// Class whose evidence is explained: sz or hc.
        #[arg(long, default_value = "sz")]
        target: String,
        /// Explain every cohort subject instead of the checkpoint's test fold.
        #[arg(long)]
        all_subjects: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Cohort directory written by `generate`; without it the configured spec is generated.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Folds trained concurrently.
    #[arg(long)]
    threads: Option<usize>,
}

impl TrainArgs {
    fn overrides(&self, seed: Option<u64>) -> Overrides {
        Overrides {
            seed,
            cohort_dir: self.cohort.clone(),
            epochs: self.epochs,
            folds: self.folds,
            lr: self.lr,
            batch_size: self.batch_size,
            threads: self.threads,
            ..Overrides::default()
        }
    }
}

#[derive(Clone)]
struct ModalitySet(Vec<Modality>);

fn parse_modalities(s: &str) -> Result<ModalitySet, String> {
    let letters: String = s.chars().filter(|c| !matches!(c, ',' | ' ')).collect();
    Modality::parse_set(&letters)
        .map(ModalitySet)
        .map_err(|e| e.to_string())
}

fn echo(cfg: &RunConfig) -> Result<()> {
    eprintln!("effective config:\n{}", serde_json::to_string_pretty(cfg)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let out = cli.out;
    match cli.command {
        Command::Generate { subjects } => {
            Overrides {
                seed: cli.seed,
                subjects,
                ..Overrides::default()
            }
            .apply(&mut cfg);
            echo(&cfg)?;
            let summary = cmd_generate(&cfg, &out)?;
            println!("wrote {}: {summary}", out.display());
        }
        Command::Train {
            common,
            modalities,
            fusion,
        } => {
            let mut o = common.overrides(cli.seed);
            o.modalities = modalities.map(|m| m.0);
            o.fusion = fusion;
            o.apply(&mut cfg);
            echo(&cfg)?;
            let t = Instant::now();
            let report = cmd_train(&cfg, &out)?;
            print!("{}", report.to_text());
            println!(
                "wrote {} ({:.1}s)",
                out.display(),
                t.elapsed().as_secs_f64()
            );
        }
        Command::Ablate { common } => {
            common.overrides(cli.seed).apply(&mut cfg);
            echo(&cfg)?;
            let t = Instant::now();
            let report = cmd_ablate(&cfg, &out, |row, _| {
                eprintln!(
                    "{:<12} acc {:.4}  [{:.1}s]",
                    row.label,
                    row.report.accuracy.mean,
                    t.elapsed().as_secs_f64()
                );
            })?;
            print!("{}", report.to_text());
            println!("wrote {} ({:.1}s)", out.display(), t.elapsed().as_secs_f64());
        }
        Command::Interpret {
            checkpoint,
            cohort,
            top_snps,
            top_connections,
            volume_maps,
            target,
            all_subjects,
        } => {
            Overrides {
                seed: cli.seed,
                cohort_dir: cohort,
                ..Overrides::default()
            }
            .apply(&mut cfg);
            echo(&cfg)?;
            let req = InterpretRequest {
                checkpoint,
                subjects: if all_subjects {
                    SubjectSet::All
                } else {
                    SubjectSet::Test
                },
                options: SaliencyOptions {
                    top_snps,
                    top_connections,
                    volume_maps,
                    target: parse_target(&target)?,
                },
            };
            let outcome = cmd_interpret(&cfg, &req, &out)?;
            if let Some(w) = &outcome.warning {
                eprintln!("warning: {w}");
            }
            let b = &outcome.bundle;
            if let Some(s) = &b.snps {
                println!("top SNP features: {:?}", s.top);
            }
            if let Some(c) = &b.connections {
                let pairs: Vec<String> = c
                    .selected
                    .iter()
                    .map(|s| format!("{} ({},{})", s.index, s.row, s.col))
                    .collect();
                println!("top connections: {}", pairs.join(", "));
            }
            println!(
                "wrote {} for {} subjects",
                out.join("saliency").display(),
                b.subject_ids.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()).context("mgt failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
