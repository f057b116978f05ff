use clap::{Parser, Subcommand};
use covo_core::config::{Preset, RunConfig};
use covo_core::pipeline;
use std::path::PathBuf;
use std::process::ExitCode;

/// Train a small character-level policy against a composite
/// value/originality score, then audit what it produces.
#[derive(Parser)]
#[command(name = "covo", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Reward mixture: covo, covo-kl, ext, covo-ext, or covo-ext-kl.
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Output directory, overriding paths.out_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Dotted-path configuration override, e.g. --set model.dim=32.
    /// Repeatable; later flags win.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the task corpus and train the base model on it.
    Pretrain,
    /// Run policy optimization starting from the pretrained model.
    Train,
    /// Sample generations for the evaluation prompts.
    Generate,
    /// Score stored generations under the frozen reference model.
    Score,
    /// Measure quality, diversity, novelty, and corpus overlap.
    Eval,
    /// Normalize a JSONL document file into the corpus index.
    Ingest {
        /// One JSON object per line with "id" and "text" fields.
        input: PathBuf,
    },
}

fn toml_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn run(cli: Cli) -> covo_core::Result<()> {
    let preset: Option<Preset> = cli.preset.as_deref().map(str::parse).transpose()?;
    let mut sets = cli.set.clone();
    if let Some(out) = &cli.out {
        sets.push(format!(
            "paths.out_dir={}",
            toml_quote(&out.display().to_string())
        ));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), preset, cli.seed, &sets)?;
    match cli.command {
        Command::Pretrain => {
            let s = pipeline::run_pretrain(&cfg)?;
            if let Some(r) = &s.ingest {
                println!(
                    "ingested {} lines: kept {}, malformed {}, empty {}, duplicates {}",
                    r.lines, r.kept, r.malformed, r.empty, r.duplicates
                );
            }
            println!(
                "pretrained on {} docs for {} epochs, final loss {:.4}",
                s.docs, s.epochs, s.final_loss
            );
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Train => {
            let s = pipeline::run_train(&cfg)?;
            let last = s.metrics.last().expect("total_batches is positive");
            println!(
                "{} updates, final reward {:.4} (s_v {:.4}, s_o {:.4}, extrinsic {:.4})",
                s.metrics.len(),
                last.mean_reward,
                last.mean_s_v,
                last.mean_s_o,
                last.mean_extrinsic
            );
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Generate => {
            let recs = pipeline::run_generate(&cfg)?;
            let overflows = recs.iter().filter(|r| r.overflow).count();
            println!(
                "wrote {} generations ({} truncated) to {}",
                recs.len(),
                overflows,
                cfg.out_dir().join("generations.jsonl").display()
            );
        }
        Command::Score => {
            let s = pipeline::run_score(&cfg)?;
            println!(
                "scored {}/{} generations, mean score {:.4}",
                s.scored,
                s.records.len(),
                s.mean_total
            );
        }
        Command::Eval => {
            let report = pipeline::run_eval(&cfg)?;
            let summary = cfg.out_dir().join("summary.txt");
            print!(
                "{}",
                std::fs::read_to_string(&summary)
                    .map_err(|e| covo_core::Error::io(&summary, e))?
            );
            let _ = report;
        }
        Command::Ingest { input } => {
            let r = pipeline::run_ingest(&cfg, &input)?;
            println!(
                "ingested {} lines: kept {}, malformed {}, empty {}, duplicates {}, dropped chars {}",
                r.lines, r.kept, r.malformed, r.empty, r.duplicates, r.dropped_chars
            );
            println!("index: {}", cfg.out_dir().join("corpus.idx").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
