use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use firmcx::pipeline::{run_pipeline, synthesize, RunConfig, Stage};
use firmcx::synth::SynthConfig;
use firmcx::{Error, Result};

/// Firm-level economic complexity indicators and growth regressions.
#[derive(Parser)]
#[command(name = "firmcx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the input tables.
    Ingest(StageArgs),
    /// Ingest, then detect product blocks and firm sectors.
    Blocks(StageArgs),
    /// Everything up to the yearly firm indicators.
    Indicators(StageArgs),
    /// Everything up to the regression tables.
    Regress(StageArgs),
    /// Everything up to the figure data.
    Figures(StageArgs),
    /// The full pipeline.
    Run(StageArgs),
    /// Write a synthetic dataset and a run config for it.
    Synth(SynthArgs),
}

#[derive(Args)]
struct StageArgs {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the block-detection seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Named preset: small, default or paper.
    #[arg(long, default_value = "default", conflicts_with = "config")]
    preset: String,
    /// TOML file with synthetic-economy settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

fn stage_run(args: &StageArgs, stage: Stage) -> Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.blocks.brim.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if args.threads.is_some() {
        config.threads = args.threads;
    }
    let report = run_pipeline(&config, stage)?;
    for r in &report.results {
        log::info!("{}: N = {}, adj. R² = {:.4}", r.model_id, r.n, r.adj_r_squared);
    }
    println!("wrote {} files to {}", report.files.len(), report.output_dir.display());
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SynthConfig::preset(&args.preset)?,
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let (data, path) = match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| synthesize(&args.out, &config))?,
        None => synthesize(&args.out, &config)?,
    };
    println!(
        "wrote {} firms, {} products to {}; run with --config {}",
        data.truth.firms.len(),
        data.truth.products.len(),
        args.out.display(),
        path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(a) => stage_run(a, Stage::Ingest),
        Command::Blocks(a) => stage_run(a, Stage::Blocks),
        Command::Indicators(a) => stage_run(a, Stage::Indicators),
        Command::Regress(a) => stage_run(a, Stage::Regress),
        Command::Figures(a) => stage_run(a, Stage::Figures),
        Command::Run(a) => stage_run(a, Stage::Figures),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
