use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use multee::error::MulteeError;
use multee::harness::{
    evaluate_checkpoint, format_ablation_table, prepare_data, run_ablation, run_experiment, run_pretrain, visualize,
    ExperimentConfig,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "multee", version, about = "Multi-hop QA over an entailment model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the entailment stack on the experiment's NLI data.
    Pretrain { config: PathBuf },
    /// Run the experiment: optional pre-training, fine-tuning and evaluation.
    Finetune { config: PathBuf },
    /// Evaluate a stored QA checkpoint on the experiment's evaluation split.
    Evaluate {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the relevance x aggregator ablation grid.
    Ablate { config: PathBuf },
    /// Export α and the joined attention matrix for one example.
    Visualize {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        example_id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<serde_json::Value, MulteeError> {
    Ok(match command {
        Command::Pretrain { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = prepare_data(&cfg)?;
            serde_json::to_value(run_pretrain(&cfg, &data)?)?
        }
        Command::Finetune { config } => serde_json::to_value(run_experiment(&config)?)?,
        Command::Evaluate { config, checkpoint } => {
            let cfg = ExperimentConfig::load(&config)?;
            serde_json::to_value(evaluate_checkpoint(&cfg, &checkpoint)?)?
        }
        Command::Ablate { config } => {
            let cells = run_ablation(&config)?;
            eprintln!("{}", format_ablation_table(&cells));
            serde_json::to_value(cells)?
        }
        Command::Visualize {
            checkpoint,
            dataset,
            example_id,
            out,
        } => serde_json::to_value(visualize(&checkpoint, &dataset, &example_id, &out)?)?,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(err) => {
            let mut body = json!({ "error": err.kind(), "message": err.to_string() });
            if let MulteeError::Config { field, .. } = &err {
                body["field"] = json!(field);
            }
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
