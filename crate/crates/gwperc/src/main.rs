//! Command-line front end: one subcommand per experiment kind, JSON
//! configs with flag overrides, reports plus plot CSVs on disk.
//!
//! Exit codes: 0 all criteria passed, 1 acceptance failure (report still
//! written), 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gwperc::harness::{
    self, preset, run_experiment, write_outputs, ExperimentConfig, ExperimentKind, HarnessError,
};
use gwperc::offspring::OffspringConfig;

#[derive(Parser)]
#[command(name = "gwperc", version, about = "Critical percolation on quenched Galton-Watson trees: simulation and limit-law verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (also settable via GWPERC_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report.json and plot CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rayon worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Runs per tree (quenched) or total runs (annealed).
    #[arg(long)]
    runs: Option<u64>,
    /// Main level n.
    #[arg(long)]
    n: Option<u32>,
    /// Number of quenched trees.
    #[arg(long)]
    trees: Option<u32>,
    /// W-estimate truncation depth.
    #[arg(long)]
    m_w: Option<u32>,
    /// Distribution as inline JSON, e.g.
    /// '{"kind":"zeta_tail","alpha":1.5}'.
    #[arg(long)]
    dist: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Derived model constants for a distribution.
    Constants(Common),
    /// Annealed survival scaling against the explicit constant.
    AnnealedSurvival(Common),
    /// Annealed conditioned-generation-size transform against phi.
    AnnealedYaglom(Common),
    /// Per-tree survival scaling against C * W.
    QuenchedSurvival(Common),
    /// Per-tree conditioned transform against phi.
    QuenchedYaglom(Common),
    /// Finite-variance transition sampler self-checks.
    CsbpMarginal(Common),
    /// Quenched level-n to level-2n transition against the flow.
    CsbpTransition(Common),
    /// Conditioned-to-survive cluster marginal against the size-biased law.
    IicMarginal(Common),
    /// Single-connector diagnostic at the prescribed lower level.
    ConnectorDiagnostic(Common),
    /// Exact identity and consistency suite.
    PropertySuite(Common),
    /// The whole verification battery.
    RunAll(Common),
}

impl Command {
    fn kind(&self) -> ExperimentKind {
        match self {
            Command::Constants(_) => ExperimentKind::Constants,
            Command::AnnealedSurvival(_) => ExperimentKind::AnnealedSurvival,
            Command::AnnealedYaglom(_) => ExperimentKind::AnnealedYaglom,
            Command::QuenchedSurvival(_) => ExperimentKind::QuenchedSurvival,
            Command::QuenchedYaglom(_) => ExperimentKind::QuenchedYaglom,
            Command::CsbpMarginal(_) => ExperimentKind::CsbpMarginal,
            Command::CsbpTransition(_) => ExperimentKind::CsbpTransition,
            Command::IicMarginal(_) => ExperimentKind::IicMarginal,
            Command::ConnectorDiagnostic(_) => ExperimentKind::ConnectorDiagnostic,
            Command::PropertySuite(_) => ExperimentKind::PropertySuite,
            Command::RunAll(_) => ExperimentKind::RunAll,
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Constants(c)
            | Command::AnnealedSurvival(c)
            | Command::AnnealedYaglom(c)
            | Command::QuenchedSurvival(c)
            | Command::QuenchedYaglom(c)
            | Command::CsbpMarginal(c)
            | Command::CsbpTransition(c)
            | Command::IicMarginal(c)
            | Command::ConnectorDiagnostic(c)
            | Command::PropertySuite(c)
            | Command::RunAll(c) => c,
        }
    }
}

fn build_config(kind: ExperimentKind, common: &Common) -> Result<ExperimentConfig, HarnessError> {
    // Seed precedence: --seed, then GWPERC_SEED, then config file, then
    // the built-in default.
    let env_seed = std::env::var(harness::SEED_ENV_VAR)
        .ok()
        .map(|s| {
            s.parse::<u64>().map_err(|_| {
                HarnessError::Config(format!("{} must be a u64, got {s:?}", harness::SEED_ENV_VAR))
            })
        })
        .transpose()?;
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let mut c: ExperimentConfig = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("bad config file: {e}")))?;
            c.kind = kind;
            c
        }
        None => preset(kind, harness::DEFAULT_MASTER_SEED),
    };
    if let Some(seed) = common.seed.or(env_seed) {
        config.seed = seed;
    }
    if let Some(runs) = common.runs {
        config.runs = runs;
    }
    if let Some(n) = common.n {
        config.n = n;
    }
    if let Some(trees) = common.trees {
        config.trees = trees;
    }
    if let Some(m_w) = common.m_w {
        config.m_w = m_w;
    }
    if let Some(dist) = &common.dist {
        config.distribution = serde_json::from_str::<OffspringConfig>(dist)
            .map_err(|e| HarnessError::Config(format!("bad --dist: {e}")))?;
    }
    if let Some(out) = &common.out {
        config.out = Some(out.to_string_lossy().into_owned());
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    let common = cli.command.common().clone();
    if let Some(threads) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    }
    let config = build_config(cli.command.kind(), &common)?;
    let report = run_experiment(&config)?;
    for c in &report.criteria {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(dir) = config.out.as_deref() {
        let written = write_outputs(&report, std::path::Path::new(dir))?;
        for p in written {
            eprintln!("wrote {}", p.display());
        }
    } else {
        println!("{}", serde_json::to_string_pretty(&report).map_err(std::io::Error::other)?);
    }
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::from(0),
        Ok(false) => ExitCode::from(1),
        Err(HarnessError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(HarnessError::Io(e)) => {
            eprintln!("io error: {e}");
            ExitCode::from(2)
        }
    }
}
