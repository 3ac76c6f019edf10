use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use xparadigm::pipeline::{self, RunArtifacts, RunConfig, RunOptions, Stage, OUT_ENV};

#[derive(Parser)]
#[command(name = "xparadigm", version, about = "Cross-paradigm usefulness and robustness of distilled features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output root; runs are written to <out>/<run-name>/<stage>/.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Reuse completed stages of an existing run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or import the natural dataset.
    GenData(Common),
    /// Build the robust and non-robust datasets.
    Distill(Common),
    /// Train encoders on every dataset under every configured paradigm.
    Train(Common),
    /// Fit and evaluate linear probes.
    Probe(Common),
    /// Measure robust accuracy of every probed encoder.
    Attack(Common),
    /// Compute per-paradigm and cross-paradigm scores.
    Metrics(Common),
    /// Transfer matrix, ablation ladder and loss trajectories.
    Transfer(Common),
    /// Render tables; with --run-dir, only print those of an existing run.
    Report {
        #[command(flatten)]
        common: Option<Common>,
        #[arg(long, conflicts_with = "config")]
        run_dir: Option<PathBuf>,
    },
    /// Run every enabled stage in order.
    Run {
        #[command(flatten)]
        common: Common,
        /// Stop after this stage.
        #[arg(long, value_parser = parse_stage)]
        stage: Option<Stage>,
    },
    /// Print the desk-scale configuration.
    InitConfig {
        #[arg(long, default_value = "desk")]
        run_name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown stage `{s}`; expected one of {:?}", Stage::ALL.map(Stage::as_str)))
}

fn execute(common: &Common, only: Option<Stage>, through: Option<Stage>) -> Result<RunArtifacts> {
    let opts = RunOptions { out: common.out.clone(), seed: common.seed, resume: common.resume, through, only };
    let cfg = RunConfig::load(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    let art = pipeline::run_config(cfg, &opts)?;
    for w in &art.warnings {
        eprintln!("warning: {w}");
    }
    for s in &art.skipped {
        eprintln!("{s}: up to date");
    }
    for r in art.stages.iter().filter(|r| art.executed.contains(&r.stage)) {
        eprintln!("{}: {} files in {:.1}s", r.stage, r.files.len(), r.seconds);
    }
    println!("{}", art.run_dir.display());
    Ok(art)
}

fn print_report(dir: &std::path::Path) -> Result<()> {
    for (name, body) in pipeline::report(dir)? {
        if name.ends_with(".md") {
            println!("## {name}\n\n{body}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let single = |c: &Common, s: Stage| execute(c, Some(s), None).map(|_| ());
    match &cli.command {
        Command::GenData(c) => single(c, Stage::GenData),
        Command::Distill(c) => single(c, Stage::Distill),
        Command::Train(c) => single(c, Stage::Train),
        Command::Probe(c) => single(c, Stage::Probe),
        Command::Attack(c) => single(c, Stage::Attack),
        Command::Metrics(c) => single(c, Stage::Metrics),
        Command::Transfer(c) => single(c, Stage::Transfer),
        Command::Report { common, run_dir } => match (common, run_dir) {
            (_, Some(dir)) => print_report(dir),
            (Some(c), None) => {
                let art = execute(c, Some(Stage::Report), None)?;
                print_report(&art.run_dir)
            }
            (None, None) => bail!("report needs --config or --run-dir"),
        },
        Command::Run { common, stage } => execute(common, None, *stage).map(|_| ()),
        Command::InitConfig { run_name, seed } => {
            println!("{}", RunConfig::desk(run_name, *seed).to_json());
            Ok(())
        }
    }
}
