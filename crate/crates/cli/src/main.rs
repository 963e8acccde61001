use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use trialnli::{F1Mode, Strategy};
use trialnli_cli::{
    cmd_build_store, cmd_opro, cmd_run, cmd_score, cmd_validate, Exit, Failure, RunArgs, RunConfig,
    Settings,
};

#[derive(Parser)]
#[command(
    name = "trialnli",
    version,
    about = "Prompting harness for clinical-trial NLI"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Config file of `key = value` lines; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

impl Common {
    fn resolve(self) -> Result<RunConfig, Failure> {
        let file = match &self.config {
            Some(p) => Settings::from_file(p).map_err(config_failure)?,
            None => Settings::default(),
        };
        RunConfig::resolve(self.settings.over(file)).map_err(config_failure)
    }
}

fn config_failure(error: anyhow::Error) -> Failure {
    Failure {
        exit: Exit::Config,
        error,
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check samples, trial reports and contrast links
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Build the exemplar store for one-shot prompting
    BuildStore {
        #[arg(long)]
        data: PathBuf,
        /// Sample file stem to use; all samples when omitted
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Predict labels with one strategy
    Run {
        /// zeroshot-cot, oneshot or opro
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// Predictions file; sidecars are written next to it
        #[arg(long)]
        out: PathBuf,
        /// Exemplar store (oneshot)
        #[arg(long)]
        store: Option<PathBuf>,
        /// Instruction pool (opro)
        #[arg(long)]
        pool: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Search for an instruction
    Opro {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// Instruction pool file
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score predictions against gold labels
    Score {
        #[arg(long)]
        predictions: PathBuf,
        /// Sample file carrying gold labels
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        links: Option<PathBuf>,
        /// entailment-positive or macro
        #[arg(long, default_value = "entailment-positive")]
        f1_mode: String,
    },
}

fn install_interrupt() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = Arc::clone(&flag);
    if let Err(e) = ctrlc::set_handler(move || {
        if f.swap(true, Ordering::SeqCst) {
            std::process::exit(Exit::Interrupted.code());
        }
        eprintln!("interrupt received; finishing in-flight requests (press again to abort)");
    }) {
        tracing::warn!("could not install interrupt handler: {e}");
    }
    flag
}

fn run(cli: Cli) -> Result<Exit, Failure> {
    let stdout = &mut std::io::stdout();
    let opt = |p: &Option<PathBuf>| p.as_deref().map(Path::to_path_buf);
    match cli.command {
        Command::Validate { data } => Ok(cmd_validate(&data, stdout)),
        Command::BuildStore {
            data,
            split,
            out,
            common,
        } => {
            let cfg = common.resolve()?;
            cmd_build_store(&data, split.as_deref(), &out, &cfg, install_interrupt())
        }
        Command::Run {
            strategy,
            data,
            split,
            out,
            store,
            pool,
            common,
        } => {
            let cfg = common.resolve()?;
            let (store, pool) = (opt(&store), opt(&pool));
            let args = RunArgs {
                strategy,
                data_dir: &data,
                split: split.as_deref(),
                out: &out,
                store: store.as_deref(),
                pool: pool.as_deref(),
            };
            cmd_run(&args, &cfg, install_interrupt())
        }
        Command::Opro {
            data,
            split,
            out,
            common,
        } => {
            let cfg = common.resolve()?;
            cmd_opro(&data, split.as_deref(), &out, &cfg, install_interrupt())
        }
        Command::Score {
            predictions,
            gold,
            links,
            f1_mode,
        } => {
            let mode: F1Mode =
                serde_json::from_value(serde_json::Value::String(f1_mode.clone()))
                    .map_err(|_| config_failure(anyhow::anyhow!("invalid f1 mode {f1_mode:?}")))?;
            cmd_score(&predictions, &gold, links.as_deref(), mode, stdout)
        }
    }
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let code = match run(Cli::parse()) {
        Ok(exit) => exit.code(),
        Err(f) => {
            eprintln!("error: {f}");
            f.exit.code()
        }
    };
    std::process::exit(code);
}
