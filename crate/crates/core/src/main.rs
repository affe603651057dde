use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iris::commands::{cmd_evaluate, cmd_explain, cmd_gradcheck, cmd_recommend, cmd_train};
use iris::config::RunConfig;
use iris::Error;

#[derive(Parser)]
#[command(name = "iris", version, about = "Attentive multimodal item-similarity recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint plus an epoch report.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Test-split HR@N / NDCG@N of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to model.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Top-N unseen items for one user.
    Recommend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// History items that drive one prediction.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        user: String,
        #[arg(long)]
        item: String,
        #[arg(long, default_value_t = 5)]
        top_m: usize,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load(common: &Common) -> iris::Result<RunConfig> {
    if common.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.hp.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> iris::Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train { common } => {
            let cfg = load(&common)?;
            cmd_train(&cfg, &mut out)?;
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            cmd_evaluate(&cfg, &ckpt, &mut out)?;
        }
        Command::Recommend {
            common,
            checkpoint,
            user,
            n,
        } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            cmd_recommend(&cfg, &ckpt, &user, n, &mut out)?;
        }
        Command::Explain {
            common,
            checkpoint,
            user,
            item,
            top_m,
        } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            cmd_explain(&cfg, &ckpt, &user, &item, top_m, &mut out)?;
        }
        Command::Gradcheck { common, checkpoint } => {
            let cfg = load(&common)?;
            cmd_gradcheck(&cfg, checkpoint.as_deref(), &mut out)?;
        }
    }
    out.flush().map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
