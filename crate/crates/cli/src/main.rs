use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use d2m_core::economics::{analyze, CatchModel, PayoffParams};
use d2m_core::harness::{
    records_csv, run_auction_to_completion, run_experiment_grid, run_scenario, run_verify_suite,
    GridSpec, Scenario,
};

#[derive(Parser)]
#[command(
    name = "d2m",
    version,
    about = "Decentralized data marketplace simulator"
)]
struct Cli {
    /// Directory for CSV and JSON outputs.
    #[arg(long, global = true, env = "D2M_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its accuracy series and records.
    Run {
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run the whole auction pipeline and settle on the ledger.
        #[arg(long)]
        auction: bool,
    },
    /// Run an experiment grid, one CSV per series.
    Grid {
        grid: PathBuf,
        /// Override the seed of every grid scenario.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the incentive conditions for one parameter set.
    Analyze {
        #[arg(long)]
        seller_pool: f64,
        #[arg(long)]
        cone_pool: f64,
        #[arg(long)]
        nodes: usize,
        #[arg(long, default_value_t = 0.0)]
        bribe: f64,
        #[arg(long)]
        quality: f64,
        #[arg(long)]
        claimed: f64,
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
        #[arg(long, default_value_t = 1)]
        rounds: u32,
        /// Per-round detection probability of the geometric catch model.
        #[arg(long, default_value_t = 0.3)]
        detection: f64,
    },
    /// Run the invariant self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn run(out_dir: &Path, path: &Path, seed: Option<u64>, auction: bool) -> Result<()> {
    let mut s = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let core = if auction {
        let (outcome, ledger) = run_auction_to_completion(&s)?;
        write(
            out_dir,
            &format!("{}.auction.json", s.name),
            &serde_json::to_string_pretty(&outcome)?,
        )?;
        write(
            out_dir,
            &format!("{}.ledger.json", s.name),
            &ledger.snapshot_json(),
        )?;
        write(
            out_dir,
            &format!("{}.txlog.ndjson", s.name),
            &ledger.export_tx_log(),
        )?;
        match outcome.core {
            Some(core) => core,
            None => {
                println!(
                    "no matching sellers; escrow refunded to {}",
                    outcome.close.winner
                );
                return Ok(());
            }
        }
    } else {
        run_scenario(&s)?
    };
    let csv = write(
        out_dir,
        &format!("{}.csv", s.name),
        &records_csv(&s, &core.records),
    )?;
    write(
        out_dir,
        &format!("{}.records.json", s.name),
        &serde_json::to_string_pretty(&core.records)?,
    )?;
    println!(
        "{}: {} rounds, test accuracy {:.4} -> {:.4}, threshold reached: {} ({})",
        s.name,
        core.rounds(),
        core.initial_test_accuracy,
        core.final_test_accuracy,
        core.reached_threshold,
        csv.display()
    );
    Ok(())
}

fn grid(out_dir: &Path, path: &Path, seed: Option<u64>) -> Result<bool> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = GridSpec::from_toml(&text)?;
    let mut scenarios = spec.scenarios();
    if let Some(seed) = seed {
        scenarios.iter_mut().for_each(|s| s.seed = seed);
    }
    let report = run_experiment_grid(&scenarios, out_dir)?;
    for e in &report.entries {
        match (&e.error, e.final_accuracy) {
            (Some(err), _) => println!("{}: error: {err}", e.name),
            (None, Some(acc)) => println!("{}: final accuracy {acc:.4}", e.name),
            (None, None) => println!("{}: no result", e.name),
        }
    }
    write(
        out_dir,
        "grid-report.json",
        &serde_json::to_string_pretty(&report)?,
    )?;
    let ok = report.failures().next().is_none();
    Ok(ok)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let ok = match cli.command {
        Command::Run {
            scenario,
            seed,
            auction,
        } => {
            run(&cli.out_dir, &scenario, seed, auction)?;
            true
        }
        Command::Grid { grid: path, seed } => grid(&cli.out_dir, &path, seed)?,
        Command::Analyze {
            seller_pool,
            cone_pool,
            nodes,
            bribe,
            quality,
            claimed,
            beta,
            rounds,
            detection,
        } => {
            let params = PayoffParams {
                seller_pool,
                cone_pool,
                node_count: nodes,
                bribe,
                quality_honest: quality,
                quality_claimed: claimed,
                success_prob: beta,
                catch_model: CatchModel::Geometric { detection },
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&analyze(&params, rounds))?
            );
            true
        }
        Command::Verify { seed } => {
            let results = run_verify_suite(seed);
            for r in &results {
                println!(
                    "{} {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
            }
            results.iter().all(|r| r.passed)
        }
    };
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
