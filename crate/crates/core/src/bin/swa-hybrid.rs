use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swa_hybrid::commands::{cmd_analyze, cmd_eval, cmd_gen, cmd_search, RunConfig, Written};
use swa_hybrid::Error;

#[derive(Parser)]
#[command(name = "swa-hybrid", version, about = "Sliding-window head selection on planted toy transformers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    method: Option<String>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Artifact directory. Falls back to the config, then $SWA_HYBRID_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the model and example sets.
    Gen,
    /// Run the selected method and write its plan.
    Search,
    /// Score plan files on the held-out set.
    Eval { plans: Vec<PathBuf> },
    /// Jaccard distances and turnover between plan files.
    Analyze { plans: Vec<PathBuf> },
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &common.method {
        cfg.method = m.clone();
    }
    if let Some(r) = common.rho {
        cfg.rho = r;
    }
    if let Some(w) = common.window {
        cfg.window = w;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os("SWA_HYBRID_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<Vec<Written>, Error> {
    let (cfg, out) = resolve(&cli.common)?;
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Gen => cmd_gen(&cfg, &out),
        Command::Search => cmd_search(&cfg, &out),
        Command::Eval { plans } => cmd_eval(&cfg, &out, plans),
        Command::Analyze { plans } => cmd_analyze(&out, plans),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(files) => {
            for f in files {
                println!("{}  {}", f.sha256, f.path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
