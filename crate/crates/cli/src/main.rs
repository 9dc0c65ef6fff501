use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ucoassoc_core::pipeline::{
    cmd_associate, cmd_evaluate, cmd_saliency, cmd_simulate, cmd_train, ExperimentConfig, MetricsBundle,
};
use ucoassoc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ucoassoc", version, about = "Learned association of angles-only observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the solutions-per-base list, e.g. `1,10,100`.
    #[arg(long, global = true, value_delimiter = ',')]
    s: Option<Vec<usize>>,

    /// Override the prune threshold.
    #[arg(long, global = true)]
    d: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate train, validation and test observation sets.
    Simulate,
    /// Train the pair classifier.
    Train,
    /// Score all pairs of a test subset; accuracy, histogram and calibration.
    Evaluate,
    /// Search for three-observation candidates.
    Associate,
    /// Write saliency maps for listed pairs.
    Saliency,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = &cli.s {
        cfg.search.s = s.clone();
    }
    if let Some(d) = cli.d {
        cfg.search.prune_threshold = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(bundle: &MetricsBundle) {
    for row in &bundle.accuracy {
        println!(
            "{}: {} features, val {:.4}, test {:.4} ({} epochs)",
            row.variant, row.n_features, row.val_acc, row.test_acc, row.epochs_run
        );
    }
    if let Some(c) = &bundle.calibration {
        println!(
            "{} pairs, base rate {:.5}, match rate above 0.95 {:.4}, non-matches below 0.2 {:.4}",
            c.n_pairs, c.base_rate, c.match_rate_above_095, c.no_match_below_02_fraction
        );
    }
    if let Some(r) = &bundle.recovery {
        for row in &r.rows {
            println!(
                "s={}: {} candidates, {} true, {}/{} objects recovered, explored {:.3e}",
                row.s, row.n_candidates, row.n_true, row.n_rso_recovered, r.n_rso_recoverable, row.explored_fraction
            );
        }
    }
    for (stage, secs) in &bundle.metadata.timings {
        println!("{stage}: {secs:.3}");
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Simulate => summarize(&cmd_simulate(&cfg, &out)?),
        Command::Train => summarize(&cmd_train(&cfg, &out)?),
        Command::Evaluate => summarize(&cmd_evaluate(&cfg, &out)?),
        Command::Associate => summarize(&cmd_associate(&cfg, &out)?),
        Command::Saliency => {
            for path in cmd_saliency(&cfg, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}

fn report(e: &Error) {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error[{}]: {msg}", e.class());
}
