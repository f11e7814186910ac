use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use refcharts::pipeline::{init_threads, run_pipeline, PipelineConfig, RunSummary, Stages};
use refcharts::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "refcharts",
    version,
    about = "Distribution-aware CT reference charts"
)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides the configuration.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every stage enabled in the configuration.
    Run,
    /// Flag measurement outliers and write the curation report.
    Curate,
    /// Extract and adjudicate report abnormalities.
    FilterReports,
    /// Fit one model per structure and contrast state.
    Fit,
    /// Bootstrap the fitted models.
    Bootstrap,
    /// Write centile tables.
    Chart,
    /// Score the cohort against the fitted models.
    Score,
    /// Fit the longitudinal models.
    Longfit,
    /// Print report-filter agreement metrics.
    Metrics,
    /// Write the bundled synthetic fixture and its configuration.
    Fixture {
        /// Destination directory.
        dir: PathBuf,
    },
}

impl Command {
    /// Position in the stage order, for stage commands.
    fn stage_index(&self) -> Option<usize> {
        match self {
            Command::Curate => Some(0),
            Command::FilterReports | Command::Metrics => Some(1),
            Command::Fit => Some(2),
            Command::Bootstrap => Some(3),
            Command::Chart => Some(4),
            Command::Score => Some(5),
            Command::Longfit => Some(6),
            Command::Run | Command::Fixture { .. } => None,
        }
    }
}

/// Keeps the configured stages up to `last`, forces `last` on and resumes
/// from any checkpoint so earlier outputs are reused.
fn restrict(stages: Stages, last: usize) -> Stages {
    let mut on = [
        stages.curate,
        stages.filter_reports,
        stages.fit,
        stages.bootstrap,
        stages.chart,
        stages.score,
        stages.longitudinal,
    ];
    for (i, flag) in on.iter_mut().enumerate() {
        *flag = i < last && *flag || i == last;
    }
    Stages {
        curate: on[0],
        filter_reports: on[1],
        fit: on[2],
        bootstrap: on[3],
        chart: on[4],
        score: on[5],
        longitudinal: on[6],
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Contract("--config is required".into()))?;
    let mut cfg = PipelineConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    Ok(cfg)
}

fn print_summary(summary: &RunSummary) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(summary)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Fixture { dir } = &cli.command {
        let path = refcharts::fixture::write_bundled(dir)?;
        println!("{}", path.display());
        return Ok(());
    }
    let mut cfg = load_config(cli)?;
    if let Some(n) = cfg.threads {
        init_threads(n)?;
    }
    if let Some(last) = cli.command.stage_index() {
        cfg.stages = restrict(cfg.stages, last);
        cfg.resume = true;
    }
    log::info!("running {:?} into {}", cli.command, cli.out.display());
    let summary = run_pipeline(&cfg, &cli.out)?;
    match cli.command {
        Command::Metrics => print_metrics(&cli.out),
        _ => print_summary(&summary),
    }
}

fn print_metrics(out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(out.join("reports").join("metrics.json"))?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
