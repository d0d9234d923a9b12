use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use osda::commands::{self, ConfigSource};
use osda::report::SweepAxis;
use osda::{Error, Result};

/// Source-free open-set domain adaptation on feature vectors.
#[derive(Debug, Parser)]
#[command(name = "osda", version)]
struct Cli {
    /// Log progress to stderr (overridden by RUST_LOG).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON configuration file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,

    /// Overrides a single key, e.g. `--set epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn source(&self) -> ConfigSource {
        ConfigSource {
            path: self.config.clone(),
            seed: self.seed,
            overrides: self.overrides.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic source and target feature CSVs.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a source model on a labelled feature CSV.
    Pretrain {
        #[arg(long)]
        source: PathBuf,
        /// Number of source classes; inferred from the labels when omitted.
        #[arg(long)]
        n_shared: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a source checkpoint to an unlabelled target CSV.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a target CSV with ground-truth labels.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat adaptation over one ablation axis and several seeds.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// One of f_assignment, combiner, n_private, components.
        #[arg(long)]
        axis: SweepAxis,
        /// Number of consecutive seeds per cell.
        #[arg(long, default_value_t = commands::MIN_SWEEP_SEEDS)]
        seeds: usize,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

const SOURCE_CHECKPOINT: &str = "source.ckpt";

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out } => {
            let cfg = config.source().synth_config()?;
            let files = commands::cmd_synth(&cfg, &out)?;
            println!("{}", files.source.display());
            println!("{}", files.target.display());
        }
        Command::Pretrain {
            source,
            n_shared,
            config,
            out,
        } => {
            let cfg = config.source().run_config()?;
            let summary = commands::cmd_pretrain(&source, n_shared, &cfg, &out.join(SOURCE_CHECKPOINT))?;
            println!("{}", serde_json::to_string(&summary).unwrap_or_default());
        }
        Command::Adapt {
            checkpoint,
            target,
            config,
            out,
        } => {
            let cfg = config.source().run_config()?;
            let report = commands::cmd_adapt(&checkpoint, &target, &cfg, &out)?;
            match &report.evaluation {
                Some(e) => println!("{}", serde_json::to_string(&e.summary()).unwrap_or_default()),
                None => println!("{}", out.join(commands::REPORT_JSON).display()),
            }
        }
        Command::Eval {
            checkpoint,
            target,
            config,
            out,
        } => {
            let cfg = config.source().run_config()?;
            let evaluation = commands::cmd_eval(&checkpoint, &target, &cfg, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&evaluation).unwrap_or_default());
        }
        Command::Sweep {
            checkpoint,
            target,
            axis,
            seeds,
            config,
            out,
        } => {
            let cfg = config.source().run_config()?;
            let path = out.join(format!("sweep_{}.csv", axis_name(axis)));
            let rows = commands::cmd_sweep(&checkpoint, &target, &cfg, axis, seeds, &path)?;
            print!("{}", osda::report::sweep_csv(axis, &rows));
        }
    }
    Ok(())
}

fn axis_name(axis: SweepAxis) -> String {
    serde_json::to_value(axis)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
