use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icube_cli::{CliError, ExperimentConfig, Result, Workspace};
use icube_core::model::Ablation;
use icube_core::LayerKind;

#[derive(Parser)]
#[command(name = "icube", version, about = "Cascading-failure prediction on interdependent infrastructure networks")]
struct Cli {
    /// TOML experiment config; the desk preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Overrides the decision threshold of the config.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic network.
    Netgen,
    /// Simulate ground-truth cascades.
    Simulate,
    /// Run the three pre-training tasks.
    Pretrain,
    /// Train a model variant.
    Train {
        #[arg(long, default_value = "full")]
        ablation: Ablation,
    },
    /// Predict the test split with a trained variant.
    Predict {
        #[arg(long, default_value = "full")]
        ablation: Ablation,
        /// Predict with the independent cascade baseline instead.
        #[arg(long, value_parser = ["icm"])]
        baseline: Option<String>,
    },
    /// Score stored predictions.
    Evaluate {
        #[arg(long, default_value = "full")]
        ablation: Ablation,
        #[arg(long, value_parser = ["icm"])]
        baseline: Option<String>,
    },
    /// Sweep initial-failure counts and locate the transition.
    SweepPhase {
        /// Restrict initial failures to one layer.
        #[arg(long)]
        layer: Option<LayerKind>,
    },
    /// Write the initial versus final size table.
    ExportHeatmap {
        #[arg(long, default_value = "full")]
        ablation: Ablation,
        #[arg(long, value_parser = ["icm"])]
        baseline: Option<String>,
    },
    /// Every stage for every variant.
    RunAll,
    /// Print the resolved config as TOML.
    PrintConfig,
}

fn name(ablation: Ablation, baseline: &Option<String>) -> String {
    baseline.clone().unwrap_or_else(|| ablation.as_str().to_string())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threshold {
        cfg.model.threshold = t;
    }
    let ws = Workspace::new(cfg, &cli.out)?;
    match cli.command {
        Command::Netgen => drop(ws.netgen()?),
        Command::Simulate => drop(ws.simulate()?),
        Command::Pretrain => drop(ws.pretrain()?),
        Command::Train { ablation } => drop(ws.train(ablation)?),
        Command::Predict { ablation, baseline } => {
            let preds = if baseline.is_some() { ws.predict_icm()? } else { ws.predict(ablation)? };
            println!("{} predictions", preds.len());
        }
        Command::Evaluate { ablation, baseline } => {
            let m = ws.evaluate(&name(ablation, &baseline))?;
            println!("{}", serde_json::to_string_pretty(&m).map_err(|e| CliError::Runtime(e.to_string()))?);
        }
        Command::SweepPhase { layer } => {
            let s = ws.sweep_phase(layer)?;
            println!("truth transition {}  predicted {}  sharpness {:.2}", s.truth_transition, s.predicted_transition, s.truth_sharpness);
        }
        Command::ExportHeatmap { ablation, baseline } => {
            println!("{}", ws.export_heatmap(&name(ablation, &baseline))?.display());
        }
        Command::RunAll => {
            for m in ws.run_all(&Ablation::ALL)? {
                let auc = m.report.overall.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
                println!("{:8} auc {auc}  f1 {:.4}", m.model, m.report.overall.f1);
            }
        }
        Command::PrintConfig => print!("{}", ws.cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
