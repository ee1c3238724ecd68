use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use prioserve::config::{run_cell, write_outputs, CellResult, ConfigError, ExperimentConfig};
use prioserve::latmodel::{fit, mape, read_profile, split_profile};
use prioserve::scenarios;

#[derive(Parser)]
#[command(name = "prioserve", about = "Multi-priority LLM serving simulator", version)]
struct Cli {
    /// Replaces every seed in the config, workload and scenarios.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true, env = "PRIOSERVE_OUT")]
    out: Option<PathBuf>,
    /// Worker threads for independent matrix cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every scheduler pair at every rate of an experiment config.
    Run { config: PathBuf },
    /// Fit latency model coefficients to a JSONL batch profile.
    Fit {
        profile: PathBuf,
        /// Fraction of samples held out for evaluation.
        #[arg(long, default_value_t = 0.2)]
        eval_fraction: f64,
    },
    /// Run a frozen scenario and check its predicate.
    Scenario { name: String },
    /// Print the version.
    Version,
}

fn cmd_run(cli: &Cli, path: &Path) -> Result<(), String> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| e.to_string())?;
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let (reqs, weights) = cfg.prepare().map_err(|e| e.to_string())?;
    let cells = cfg.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build()
        .map_err(|e| e.to_string())?;
    // write_outputs sorts by cell index, so completion order is irrelevant
    let results: Result<Vec<CellResult>, ConfigError> =
        pool.install(|| cells.par_iter().map(|c| run_cell(&cfg, c, &reqs, &weights)).collect());
    let results = results.map_err(|e| e.to_string())?;
    for r in &results {
        let rep = &r.result.report;
        println!(
            "{:<36} rate {:>8.3}  tdg_ratio {:.4}  slo_attainment {:.4}",
            r.cell.pair.label(),
            r.rate,
            rep.tdg_ratio,
            rep.slo_attainment
        );
    }
    let files = write_outputs(&cfg, &reqs, &weights, &results, &out).map_err(|e| e.to_string())?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn cmd_fit(cli: &Cli, path: &Path, eval_fraction: f64) -> Result<(), String> {
    let file = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let samples = read_profile(BufReader::new(file)).map_err(|e| format!("{}: {e}", path.display()))?;
    let (train, eval) = split_profile(&samples, eval_fraction, cli.seed.unwrap_or(0));
    let params = fit(&train).map_err(|e| format!("fit failed: {e}"))?;
    let json = serde_json::to_string_pretty(&params).map_err(|e| e.to_string())?;
    println!("{json}");
    let eval_mape = mape(&params, &eval);
    println!(
        "train {} eval {} train_mape {:.6} heldout_mape {:.6}",
        train.len(),
        eval.len(),
        mape(&params, &train),
        eval_mape
    );
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let p = dir.join("fit_params.json");
        std::fs::write(&p, json + "\n").map_err(|e| format!("{}: {e}", p.display()))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_scenario(cli: &Cli, name: &str) -> Result<(), String> {
    let rep = scenarios::by_name(name, cli.seed).map_err(|e| e.to_string())?;
    print!("{rep}");
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let p = dir.join(format!("scenario_{name}.json"));
        let json = serde_json::to_string_pretty(&rep).map_err(|e| e.to_string())?;
        std::fs::write(&p, json + "\n").map_err(|e| format!("{}: {e}", p.display()))?;
    }
    if rep.passed {
        Ok(())
    } else {
        Err(format!("scenario {name} failed its predicate"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Run { config } => cmd_run(&cli, config),
        Cmd::Fit { profile, eval_fraction } => cmd_fit(&cli, profile, *eval_fraction),
        Cmd::Scenario { name } => cmd_scenario(&cli, name),
        Cmd::Version => {
            println!("prioserve {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
