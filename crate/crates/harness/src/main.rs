use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ktele::commands;
use ktele::config::{EncoderKind, ExperimentConfig};
use ktele::eval::Task;
use ktele::report::MetricsReport;
use ktele::service::ServiceFormat;
use ktele::synth::SyntheticSpec;
use ktele_core::schedule::Strategy;

#[derive(Parser)]
#[command(
    name = "ktele",
    version,
    about = "Telecom language model pre-training, re-training and evaluation"
)]
struct Cli {
    /// Experiment configuration; defaults to `<output-dir>/config.json` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, KG and task datasets.
    GenSynthetic {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage-one pre-training; writes `backbone.safetensors`.
    Pretrain,
    /// Multi-task re-training from the backbone.
    Retrain {
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        scale: Option<String>,
        /// Train without the numeric encoder (`ktele_no_anenc`).
        #[arg(long)]
        no_anenc: bool,
    },
    /// Print service vectors for the names in a file, one per line.
    Encode {
        #[arg(long)]
        format: ServiceFormat,
        #[arg(long)]
        names: PathBuf,
        #[arg(long, default_value = "ktele")]
        encoder: EncoderKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    EvalRca {
        #[arg(long)]
        encoder: EncoderKind,
    },
    EvalEap {
        #[arg(long)]
        encoder: EncoderKind,
    },
    EvalFct {
        #[arg(long)]
        encoder: EncoderKind,
    },
    EvalKpi {
        #[arg(long)]
        encoder: EncoderKind,
    },
    /// PCA projections of KPI point vectors and numeric value embeddings.
    Report {
        #[arg(long, default_value = "ktele")]
        encoder: EncoderKind,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let dir = cli
                .output_dir
                .clone()
                .unwrap_or_else(|| ExperimentConfig::default().output_dir);
            let saved = dir.join("config.json");
            if saved.exists() {
                ExperimentConfig::load(&saved)?
            } else {
                ExperimentConfig::default()
            }
        }
    };
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn emit(report: &MetricsReport) -> Result<()> {
    print!("{}", report.to_json()?);
    eprintln!("{}", report.table());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    let mut evaluation = None;
    match &cli.command {
        Command::GenSynthetic { spec, seed } => {
            if let Some(p) = spec {
                cfg.synthetic = serde_json::from_str::<SyntheticSpec>(&std::fs::read_to_string(p)?)
                    .with_context(|| format!("parsing {}", p.display()))?;
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
        }
        Command::Retrain {
            strategy,
            scale,
            no_anenc,
        } => {
            if let Some(s) = strategy {
                cfg.retrain.strategy = *s;
            }
            if let Some(s) = scale {
                cfg.retrain.scale = s.clone();
            }
            cfg.retrain.anenc = !no_anenc;
        }
        Command::EvalRca { encoder } => evaluation = Some((Task::Rca, *encoder)),
        Command::EvalEap { encoder } => evaluation = Some((Task::Eap, *encoder)),
        Command::EvalFct { encoder } => evaluation = Some((Task::Fct, *encoder)),
        Command::EvalKpi { encoder } => evaluation = Some((Task::Kpi, *encoder)),
        _ => {}
    }
    cfg.apply_env()?;
    cfg.validate()?;
    std::fs::create_dir_all(cfg.reports_dir())?;

    if let Some((task, encoder)) = evaluation {
        return emit(&commands::eval(&cfg, task, encoder)?);
    }
    match cli.command {
        Command::GenSynthetic { .. } => {
            let data = commands::gen_synthetic(&cfg)?;
            cfg.save(&cfg.output_dir.join("config.json"))?;
            emit(&commands::dataset_report(&cfg, &data)?)
        }
        Command::Pretrain => emit(&commands::pretrain(&cfg)?),
        Command::Retrain { .. } => emit(&commands::retrain(&cfg)?),
        Command::Encode {
            format,
            names,
            encoder,
            out,
        } => {
            let text = std::fs::read_to_string(&names).with_context(|| format!("reading {}", names.display()))?;
            let names: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let encoded = commands::encode(&cfg, encoder, format, names)?;
            let json = serde_json::to_string_pretty(&encoded)? + "\n";
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => print!("{json}"),
            }
            let missing = encoded.fell_back.iter().filter(|&&f| f).count();
            eprintln!(
                "{} vectors of dim {}, {missing} without a KG match",
                encoded.vectors.len(),
                encoded.vectors.first().map_or(0, Vec::len)
            );
            Ok(())
        }
        Command::Report { encoder } => {
            for p in commands::embedding_reports(&cfg, encoder)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::EvalRca { .. } | Command::EvalEap { .. } | Command::EvalFct { .. } | Command::EvalKpi { .. } => {
            unreachable!()
        }
    }
}
