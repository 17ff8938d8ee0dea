use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mvpr_core::commands::{
    cmd_analyze_distances, cmd_analyze_reassign, cmd_embed, cmd_eval, cmd_synth_gen, cmd_train, TrainPlan, TrainStart,
};
use mvpr_core::config::RunConfig;
use mvpr_core::persist::load_checkpoint;

/// Place recognition with per-cell view clustering on synthetic panoramas.
#[derive(Parser, Debug)]
#[command(name = "mvpr", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Precedence: these flags, then the
/// `--config` file, then built-in defaults (or the checkpoint's config when
/// resuming).
#[derive(Args, Debug)]
struct Common {
    /// Key-value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for world generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world: manifests, token sidecars and truth files.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder and classifier with alternating re-clustering.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Ground-truth file; enables purity metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Clusters per grid cell.
        #[arg(long)]
        k: Option<usize>,
        /// Stop after this epoch; the schedule still spans `epochs`.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Write a descriptor database for a manifest.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@K of query descriptors against a database.
    Eval {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Query truth file; adds the occluded-only report.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Comma-separated recall cutoffs.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Positive radius in meters.
        #[arg(long)]
        radius: Option<f64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster diagnostics.
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Subcommand, Debug)]
enum Analyze {
    /// Adjacent-class descriptor distances per cell.
    Distances {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
        /// Manifest supplying headings for class order.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Images that changed cluster between two snapshots.
    Reassign {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
    },
}

fn resolve(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        cfg.apply_file(path).with_context(|| format!("config file {}", path.display()))?;
    }
    for pair in &common.set {
        cfg.apply_override(pair).with_context(|| format!("--set {pair}"))?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String> {
    let c = &cli.common;
    let out = match cli.command {
        Command::SynthGen { out } => cmd_synth_gen(&resolve(c, RunConfig::default())?, &out, c.force)?,
        Command::Train { manifest, truth, out, resume, k, until } => {
            let base = match &resume {
                Some(p) => load_checkpoint(p).with_context(|| format!("checkpoint {}", p.display()))?.0,
                None => RunConfig::default(),
            };
            let mut cfg = resolve(c, base)?;
            if let Some(k) = k {
                cfg.train.k = k;
            }
            let start = resume.as_deref().map_or(TrainStart::Fresh, TrainStart::Resume);
            cmd_train(&cfg, &manifest, truth.as_deref(), &out, TrainPlan { start, until }, c.force)?
        }
        Command::Embed { checkpoint, manifest, out } => cmd_embed(&checkpoint, &manifest, &out, c.force)?,
        Command::Eval { db, queries, truth, k, radius, out } => {
            let mut cfg = resolve(c, RunConfig::default())?;
            if let Some(ks) = k {
                cfg.ks = ks;
            }
            if let Some(r) = radius {
                cfg.radius = r;
            }
            cfg.validate()?;
            cmd_eval(&db, &queries, truth.as_deref(), &cfg.ks, cfg.radius, out.as_deref(), c.force)?
        }
        Command::Analyze(Analyze::Distances { db, snapshot, manifest }) => {
            cmd_analyze_distances(&db, &snapshot, manifest.as_deref())?
        }
        Command::Analyze(Analyze::Reassign { before, after }) => cmd_analyze_reassign(&before, &after)?,
    };
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    log::debug!("{cli:?}");
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
