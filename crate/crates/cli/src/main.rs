use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scalemix::data::Split;
use scalemix_cli::commands::{self, TrainArgs};
use scalemix_cli::{CliError, CliResult, RunConfig};

/// Multiscale forecaster experiments.
#[derive(Parser)]
#[command(name = "scalemix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multivariate series as CSV.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded random backbone checkpoint.
    InitBackbone {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write its checkpoint and per-epoch report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Backbone checkpoint; a seeded random backbone is used otherwise.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Append wall-clock milliseconds to each report line.
        #[arg(long)]
        timing: bool,
    },
    /// Evaluate a trained model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Supplies the CSV schema and split fractions.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also evaluate the repeat-last-value baseline.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per downsampling level and compare their kernels.
    NtkSweep {
        #[arg(long)]
        config: PathBuf,
        /// e.g. `1..6` or `1,2,10`; defaults to `ntk.taus`.
        #[arg(long)]
        tau_list: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Bundled synthetic series when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare pooling techniques for the downsampler.
    AblatePooling {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the contents of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("SCALEMIX_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "SCALEMIX_THREADS must be a positive integer, got `{value}`"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cmd: Command) -> CliResult<()> {
    configure_threads()?;
    match cmd {
        Command::GenData { spec, seed, out } => {
            let series = commands::gen_data(&spec, seed, &out)?;
            println!(
                "wrote {} rows x {} channels to {}",
                series.len(),
                series.n_channels(),
                out.display()
            );
        }
        Command::InitBackbone { config, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            let hash = commands::init_backbone_cmd(&cfg, seed, &out)?;
            println!("{hash}");
        }
        Command::Train {
            config,
            data,
            out_model,
            report,
            backbone,
            vocab,
            seed,
            timing,
        } => {
            let (_, rep) = commands::train_cmd(&TrainArgs {
                config,
                data,
                out_model,
                report,
                backbone,
                vocab,
                seed,
                timing,
            })?;
            print!("{}", rep.render(timing));
        }
        Command::Eval {
            model,
            data,
            config,
            split,
            baseline,
            out,
        } => {
            let split = Split::parse(&split).ok_or_else(|| {
                CliError::Usage(format!("unknown split `{split}` (train, val or test)"))
            })?;
            let rows = commands::eval_cmd(
                &model,
                &data,
                config.as_deref(),
                split,
                baseline,
                out.as_deref(),
            )?;
            print!("{}", commands::render_eval(&rows));
        }
        Command::NtkSweep {
            config,
            tau_list,
            samples,
            out_dir,
            data,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            let taus = match tau_list {
                Some(t) => commands::parse_tau_list(&t)?,
                None => cfg.ntk.taus.clone(),
            };
            let n = samples.unwrap_or(cfg.ntk.samples);
            let result = commands::ntk_sweep_cmd(&cfg, &taus, n, data.as_deref(), &out_dir)?;
            for (t, d) in &result.curve {
                println!("tau={t} distance={d}");
            }
            print!("{}", result.summary());
        }
        Command::AblatePooling {
            config,
            data,
            out,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            let rows = commands::ablate_pooling_cmd(&cfg, data.as_deref(), &out)?;
            for r in rows {
                println!(
                    "pooling={} mse={} mae={}",
                    r.pooling, r.metrics.mse, r.metrics.mae
                );
            }
        }
        Command::Inspect { checkpoint } => print!("{}", commands::inspect_cmd(&checkpoint)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.kind().to_string());
            let _ = e.print();
            eprintln!("{}", err.diagnostic());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
