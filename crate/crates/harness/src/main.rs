use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moue::checkpoint::read_checkpoint;
use moue::experiment::{run_analyze, run_convert, run_topo, run_train, CHECKPOINT_FILE};
use moue::{ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "moue", version, about = "Universal-expert MoE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file; unset keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override output.dir
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic corpus and write training reports
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint (e.g. a converted model)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Convert a layer-local MoE checkpoint into a universal-expert model
    Convert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write connectivity, exposure, path-count and budget reports
    Topo {
        #[command(flatten)]
        common: Common,
    },
    /// Write CKA, universal-share and heatmap reports for a checkpoint
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Train { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let init = checkpoint.as_deref().map(read_checkpoint).transpose()?;
            let s = run_train(&cfg, init)?;
            println!(
                "trained {} steps: task_loss={:.6} terminal_max_mean={:.4} -> {}",
                cfg.steps,
                s.final_task_loss,
                s.terminal_skew,
                cfg.output_dir.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Convert { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let s = run_convert(&cfg, &checkpoint)?;
            if s.passthrough {
                eprintln!("warning: universal pool is empty; copied the source unchanged");
            }
            println!("ring_pos  source_layer  source_expert  rate");
            for e in &s.selection {
                println!("{:>8}  {:>12}  {:>13}  {:.4}", e.ring_pos, e.source_layer, e.source_expert, e.rate);
            }
            println!("-> {}", cfg.output_dir.join(CHECKPOINT_FILE).display());
        }
        Command::Topo { common } => {
            let cfg = load_config(&common)?;
            let map = run_topo(&cfg)?;
            println!(
                "{} layers, {} experts, {} fast-weight states -> {}",
                map.num_layers(),
                map.num_experts(),
                map.num_states(),
                cfg.output_dir.display()
            );
        }
        Command::Analyze { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let s = run_analyze(&cfg, &checkpoint)?;
            let mean = s.ue_ratio.iter().sum::<f64>() / s.ue_ratio.len().max(1) as f64;
            println!("mean universal share {mean:.4} -> {}", cfg.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
