use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use semmem::pipeline::{self, predict::SplitFilter, PredictInput};
use semmem::{Error, Result};

#[derive(Parser)]
#[command(
    name = "semmem",
    version,
    about = "Learn driving events from scene snapshots and predict how episodes continue"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the spatial and the temporal seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the spatial grammar and the event catalog.
    TrainSpatial {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Segment training episodes into events and learn their order.
    TrainTemporal {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory holding the spatial artifacts.
        #[arg(long, default_value = "out")]
        spatial: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Label time steps and predict episode continuations, one JSON line per step.
    Predict {
        /// Scenario file, `*.jsonl` step stream, or `-` for a stream on stdin.
        input: String,
        /// Directory holding the artifacts of both training phases.
        #[arg(long, default_value = "out")]
        artifacts: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[command(flatten)]
        common: Common,
        /// Also write step reports and the grown catalog here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regression report over fixtures.
    Eval {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Evaluate against these artifacts instead of training per fixture.
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl From<SplitArg> for SplitFilter {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitFilter::Train,
            SplitArg::Test => SplitFilter::Test,
            SplitArg::All => SplitFilter::All,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainSpatial {
            inputs,
            common,
            out,
        } => {
            let cfg = pipeline::resolve_config(common.config.as_deref(), common.seed)?;
            let s = pipeline::train_spatial(&inputs, &cfg, &out)?;
            eprintln!(
                "spatial grammar: {} iterations, log-likelihood {:.6}, {} event classes -> {}",
                s.manifest.iterations,
                s.manifest.final_log_likelihood,
                s.catalog.len(),
                out.display()
            );
        }
        Command::TrainTemporal {
            inputs,
            spatial,
            common,
            out,
        } => {
            let cfg = pipeline::resolve_config(common.config.as_deref(), common.seed)?;
            let t = pipeline::train_temporal(&inputs, &spatial, &cfg, &out)?;
            eprintln!(
                "temporal pcfg: {} episodes, {} iterations, log-likelihood {:.6} -> {}",
                t.manifest.episodes,
                t.manifest.iterations,
                t.manifest.final_log_likelihood,
                out.display()
            );
        }
        Command::Predict {
            input,
            artifacts,
            split,
            common,
            out,
        } => {
            let cfg = pipeline::resolve_config(common.config.as_deref(), common.seed)?;
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            pipeline::predict(
                PredictInput::from_arg(&input, split.into()),
                &artifacts,
                &cfg,
                out.as_deref(),
                &mut lock,
            )?;
            lock.flush().map_err(|e| Error::Io {
                context: "flushing stdout".into(),
                source: e,
            })?;
        }
        Command::Eval {
            inputs,
            artifacts,
            common,
            out,
        } => {
            let cfg = pipeline::resolve_config(common.config.as_deref(), common.seed)?;
            let report = pipeline::eval(&inputs, artifacts.as_deref(), &cfg, out.as_deref())?;
            print!("{}", report.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // reader went away (e.g. `| head`)
        Err(Error::Io { source, .. }) if source.kind() == io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
