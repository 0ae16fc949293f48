use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use prunelab::experiment::{
    evaluate, pivot_table, read_results, report, results_to_string, run_sweep, save_checkpoint,
    ExperimentConfig, SweepContext, RESULTS_FILE,
};
use prunelab::nn::build_model;
use prunelab::prune::PruneMethod;
use prunelab::seeds::SeedStreams;
use prunelab::train::train_fresh;
use prunelab::{Error, Result};

/// Early-pruning laboratory: IMP, SNIP, SynFlow and DRIVE on desk-scale models.
#[derive(Debug, Parser)]
#[command(name = "prunelab", version, arg_required_else_help = true)]
struct Cli {
    /// Use this single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write artifacts here instead of the config's output_dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Parallel runs in a sweep.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    /// Only warnings and errors on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the dense model for the full budget and checkpoint it.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Prune with one method, train the sparse model, evaluate, checkpoint.
    Prune {
        #[arg(long)]
        config: PathBuf,
        /// imp, snip, synflow or drive.
        #[arg(long)]
        method: PruneMethod,
        /// Fraction of prunable weights removed, in [0, 1).
        #[arg(long, value_parser = parse_sparsity, allow_negative_numbers = true)]
        sparsity: f64,
    },
    /// Every method × sparsity × seed in the config; rows go to results.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pivot a results CSV into a mean ± std table.
    Report {
        results_path: PathBuf,
        /// Table destination; a .csv summary is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_sparsity(s: &str) -> std::result::Result<f64, String> {
    let k: f64 = s.parse().map_err(|e| format!("`{s}` is not a number: {e}"))?;
    if (0.0..1.0).contains(&k) {
        Ok(k)
    } else {
        Err(format!("{k} is outside [0, 1); sparsity is a fraction, not a percentage"))
    }
}

fn load_config(path: &Path, cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w as usize;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn train(cfg: ExperimentConfig) -> Result<()> {
    let seed = cfg.seeds[0];
    let ctx = SweepContext::new(cfg)?;
    let streams = SeedStreams::from_seed(seed);
    let mut model = build_model(ctx.spec.clone(), streams.init)?;
    let t0 = Instant::now();
    let losses = train_fresh(
        &mut model,
        &ctx.train,
        &ctx.config.train_settings(),
        0..ctx.config.total_epochs,
        streams.shuffle,
    )?;
    let seconds = t0.elapsed().as_secs_f64();
    let accuracy = evaluate(&model, &ctx.test)?;
    create_dir(&ctx.config.output_dir)?;
    let path = ctx.config.output_dir.join(format!("dense-s{seed}.prlb"));
    save_checkpoint(&model, None, &path)?;
    log::info!("saved {}", path.display());
    println!(
        "model={} dataset={} seed={seed} epochs={} final_loss={:.6} test_accuracy={accuracy:.6} train_seconds={seconds:.3}",
        ctx.spec.name,
        ctx.dataset_label,
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
    );
    Ok(())
}

fn prune(cfg: ExperimentConfig, method: PruneMethod, kappa: f64) -> Result<()> {
    let seed = cfg.seeds[0];
    let ctx = SweepContext::new(cfg)?;
    let (result, model) = ctx.run_keep(method, kappa, seed);
    create_dir(&ctx.config.output_dir)?;
    if let Some(model) = model {
        let path = ctx
            .config
            .output_dir
            .join(format!("{method}-k{kappa}-s{seed}.prlb"));
        save_checkpoint(&model, None, &path)?;
        log::info!("saved {}", path.display());
    }
    print!("{}", results_to_string(std::slice::from_ref(&result))?);
    if result.failed() {
        return Err(Error::InvalidArg(format!(
            "run failed: {}",
            result.collapsed_layers.trim_start_matches("error: ")
        )));
    }
    Ok(())
}

fn sweep(cfg: ExperimentConfig) -> Result<()> {
    let results = run_sweep(&cfg)?;
    print!("{}", pivot_table(&results)?);
    log::info!("wrote {}", cfg.output_dir.join(RESULTS_FILE).display());
    Ok(())
}

fn summarize(results_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let results = read_results(results_path)?;
    let out = out.unwrap_or_else(|| results_path.with_file_name("summary.txt"));
    print!("{}", report(&results, &out)?);
    log::info!("wrote {} and {}", out.display(), out.with_extension("csv").display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config } => train(load_config(config, cli)?),
        Command::Prune {
            config,
            method,
            sparsity,
        } => prune(load_config(config, cli)?, *method, *sparsity),
        Command::Sweep { config } => sweep(load_config(config, cli)?),
        Command::Report { results_path, out } => summarize(results_path, out.clone()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = if cli.quiet { "warn" } else { "info" };
    let mut logger = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default));
    if cli.quiet {
        logger.filter_level(log::LevelFilter::Warn);
    }
    logger.format_timestamp_millis().init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
