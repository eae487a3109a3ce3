use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedpt::error::{Error, Result};
use fedpt::experiment::{
    cmd_decode, cmd_eval, cmd_pretrain, cmd_run, parse_split, partition_inspect, rerun_manifest,
    ExperimentConfig, SystemKind,
};
use fedpt::federation::Mode;

/// Desk-scale simulator of federated proxy-tuning: devices adapter-tune a
/// small byte-level language model, the server steers a frozen large model
/// with the tuned-minus-pretuned logit offset and distills it back.
#[derive(Parser)]
#[command(name = "fedpt", version, arg_required_else_help = true)]
struct Cli {
    /// Cap worker threads used for intra-run parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct OutDir {
    /// Output directory for artifacts; falls back to $FEDPT_OUT, then "runs".
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutDir {
    fn resolve(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("FEDPT_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the small and large base models on generated general text.
    Pretrain {
        /// Experiment TOML; omit to use built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Execute a federated experiment and write its manifest.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// One of: fedpt, fedavg-small, fedavg-plus-pt, base.
        #[arg(long)]
        mode: String,
        #[command(flatten)]
        out: OutDir,
        /// Override federation.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override federation.rounds from the config.
        #[arg(long)]
        rounds: Option<usize>,
        /// Override federation.alpha from the config.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Re-execute a finished run from its manifest and verify the logs match.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score a finished run's checkpoints on a corpus split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpointed round to score; defaults to the latest.
        #[arg(long)]
        round: Option<usize>,
        /// One of: train, val, test, public.
        #[arg(long, default_value = "test")]
        dataset: String,
        /// Comma-separated proxy strengths, e.g. "1.0,1.5,2.0".
        #[arg(long, value_delimiter = ',')]
        alpha_sweep: Vec<f64>,
        /// Comma-separated systems to score: base, small-tuned, proxy.
        /// Defaults to the run's natural system.
        #[arg(long, value_delimiter = ',')]
        systems: Vec<String>,
        /// Write the reports to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a completion from a finished run's artifacts.
    Decode {
        #[arg(long)]
        manifest: PathBuf,
        /// Instruction text; wrapped in the prompt template unless --raw.
        #[arg(long)]
        prompt: String,
        /// Optional input block for the template.
        #[arg(long, default_value = "")]
        input: String,
        /// Feed the prompt to the model verbatim.
        #[arg(long)]
        raw: bool,
        /// Proxy strength; defaults to the run's configured value.
        #[arg(long)]
        alpha: Option<f64>,
        /// Checkpointed round to decode from; defaults to the latest.
        #[arg(long)]
        round: Option<usize>,
        /// Also print the large-base and small-tuned completions.
        #[arg(long)]
        compare: bool,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
    /// Show how the configured partition spreads categories over devices.
    PartitionInspect {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let config = ExperimentConfig::default();
            config.validate()?;
            Ok(config)
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::contract(format!("serialization failed: {e}")))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return Err(Error::input("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::config(format!("worker pool setup failed: {e}")))?;
    }

    match cli.cmd {
        Cmd::Pretrain { config, out } => {
            let config = load_config(&config)?;
            let report = cmd_pretrain(&config, &out.resolve())?;
            print_json(&report)
        }
        Cmd::Run {
            config,
            mode,
            out,
            seed,
            rounds,
            alpha,
        } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = seed {
                config.federation.seed = seed;
            }
            if let Some(rounds) = rounds {
                config.federation.rounds = rounds;
            }
            if let Some(alpha) = alpha {
                config.federation.alpha = alpha;
            }
            let mode = Mode::parse(&mode)?;
            let manifest = cmd_run(&config, mode, &out.resolve())?;
            print_json(&manifest)
        }
        Cmd::Rerun { manifest } => {
            let outcome = rerun_manifest(&manifest)?;
            println!(
                "{}",
                serde_json::json!({
                    "identical": outcome.identical,
                    "rounds": outcome.replay.len(),
                })
            );
            if outcome.identical {
                Ok(())
            } else {
                Err(Error::contract(
                    "replayed rounds do not match the stored metrics log",
                ))
            }
        }
        Cmd::Eval {
            manifest,
            round,
            dataset,
            alpha_sweep,
            systems,
            out,
        } => {
            let dataset = parse_split(&dataset)?;
            let systems = systems
                .iter()
                .map(|s| SystemKind::parse(s))
                .collect::<Result<Vec<_>>>()?;
            let records = cmd_eval(&manifest, round, dataset, &alpha_sweep, &systems)?;
            match out {
                Some(path) => {
                    let text = serde_json::to_string_pretty(&records)
                        .map_err(|e| Error::contract(format!("serialization failed: {e}")))?;
                    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                    Ok(())
                }
                None => print_json(&records),
            }
        }
        Cmd::Decode {
            manifest,
            prompt,
            input,
            raw,
            alpha,
            round,
            compare,
            max_len,
        } => {
            let output = cmd_decode(
                &manifest, &prompt, &input, raw, alpha, round, compare, max_len,
            )?;
            print_json(&output)
        }
        Cmd::PartitionInspect { config } => {
            let config = load_config(&config)?;
            let histograms = partition_inspect(&config)?;
            print_json(&histograms)
        }
    }
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
