use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use duet_cli::commands;
use duet_cli::config::{CorpusKind, RunConfig};
use duet_cli::run::{LoadedRun, StageSel};
use duet_cli::server::{serve, AppState};

#[derive(Parser)]
#[command(name = "duet", version, about = "Train, evaluate and serve desk-scale dialogue models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by commands that read a run configuration.
#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `corpus.kind`.
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Overrides `corpus.samples`.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum KindArg {
    Open,
    OpenDeterministic,
    Knowledge,
    Task,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            c.set_seed(s);
        }
        if let Some(k) = self.kind {
            c.corpus.kind = match k {
                KindArg::Open => CorpusKind::Open,
                KindArg::OpenDeterministic => CorpusKind::OpenDeterministic,
                KindArg::Knowledge => CorpusKind::Knowledge,
                KindArg::Task => CorpusKind::Task,
            };
        }
        if let Some(n) = self.samples {
            c.corpus.samples = n;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as JSON lines.
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage or the whole curriculum into a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageSel,
        /// Overrides `paths.run`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Train on this corpus file instead of generating one.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Interactive terminal chat with a trained run.
    Chat {
        #[arg(long)]
        run: PathBuf,
        /// Knowledge sentences, one per line.
        #[arg(long)]
        knowledge: Option<PathBuf>,
    },
    /// Generate and score every latent candidate for a context file.
    Score {
        #[arg(long)]
        run: PathBuf,
        /// Context turns, one per line, oldest first.
        #[arg(long)]
        context: PathBuf,
        #[arg(long)]
        knowledge: Option<PathBuf>,
    },
    /// Task success rates against the user simulator.
    Simulate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 100)]
        goals: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write every dialogue as JSON lines.
        #[arg(long)]
        dialogues: Option<PathBuf>,
    },
    /// Held-out metrics for a run.
    Metrics {
        #[arg(long)]
        run: PathBuf,
    },
    /// HTTP chat API and console.
    Serve {
        /// One run per mode.
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Console bundle directory.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Idle session lifetime in seconds.
        #[arg(long, default_value_t = 1800)]
        ttl: u64,
    },
}

fn print(report: &duet_cli::report::Report) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string(report)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenCorpus { cfg, out } => print(&commands::gen_corpus(&cfg.resolve()?, &out)?),
        Command::Train { cfg, stage, run, corpus } => {
            let mut c = cfg.resolve()?;
            if let Some(r) = run {
                c.paths.run = r;
            }
            print(&commands::train_run(&c, stage, corpus.as_deref())?)
        }
        Command::Chat { run, knowledge } => {
            let stdin = std::io::stdin();
            commands::chat(&run, knowledge.as_deref(), stdin.lock(), std::io::stdout())?;
            Ok(())
        }
        Command::Score { run, context, knowledge } => print(&commands::score(&run, &context, knowledge.as_deref())?),
        Command::Simulate { run, goals, seed, dialogues } => {
            print(&commands::simulate(&run, goals, seed, dialogues.as_deref())?)
        }
        Command::Metrics { run } => print(&commands::metrics(&run)?),
        Command::Serve { run, bind, static_dir, ttl } => {
            let runs = run.iter().map(|r| LoadedRun::load(r)).collect::<anyhow::Result<Vec<_>>>()?;
            let app = Arc::new(AppState::new(runs, Duration::from_secs(ttl))?);
            tokio::runtime::Runtime::new()?.block_on(serve(app, static_dir, &bind))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
