//! `pfl`: run exposure scenarios, emit plot data and check limits.
//!
//! Exit codes: 0 clean, 2 configuration or input error, 3 limit breach,
//! 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pfl_core::report::{self, RunOptions};
use pfl_core::scenario::load_scenario;

#[derive(Parser)]
#[command(
    name = "pfl",
    version,
    about = "Counterparty exposure and potential future loss engine"
)]
struct Cli {
    /// Worker threads for path-parallel loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ScenarioArgs {
    /// Scenario file.
    scenario: PathBuf,

    /// `dotted.key=value` overrides applied before validation.
    #[arg(long = "override", value_name = "KEY=VALUE", num_args = 1..)]
    overrides: Vec<String>,

    /// Output directory (takes precedence over PFL_OUTPUT_DIR and the scenario).
    #[arg(long)]
    output_dir: Option<PathBuf>,

    /// Also write the raw exposure cube to this file.
    #[arg(long)]
    cube_dump: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write profiles, ratios and limit breaches.
    Run(ScenarioArgs),
    /// Run a scenario and additionally write plot-ready data under `plot/`.
    PlotData(ScenarioArgs),
    /// Check stored profiles against a limits file.
    CheckLimits {
        /// Directory holding `<metric>_q<q>.csv` profiles.
        #[arg(long)]
        profiles: PathBuf,
        /// CSV with columns counterparty,netting_set,metric,q,limit.
        #[arg(long)]
        limits: PathBuf,
        /// Incurred CVA for aPFL/paPFL limits (default: the run's incurred_cva.json).
        #[arg(long)]
        incurred_cva: Option<f64>,
        /// Write the breach report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Load and validate a scenario without simulating.
    Validate {
        scenario: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE", num_args = 1..)]
        overrides: Vec<String>,
    },
}

fn run_scenario(args: &ScenarioArgs, plot: bool) -> pfl_core::Result<i32> {
    let scenario = load_scenario(&args.scenario, &args.overrides)?;
    let outputs = report::run(
        &scenario,
        &RunOptions {
            output_dir: args.output_dir.clone(),
            cube_dump: args.cube_dump.clone(),
        },
    )?;
    let r = &outputs.report;
    println!(
        "{}: {} paths, {} reporting dates, outputs in {}",
        r.scenario,
        r.n_paths,
        r.n_reporting_dates,
        r.output_dir.display()
    );
    if plot {
        let dir = report::emit_plot_data(&outputs)?;
        println!("plot data in {}", dir.display());
    }
    for b in r.breaches.iter().filter(|b| b.breached) {
        println!(
            "BREACH {} {} {} q={} limit={} first at t={:?}",
            b.counterparty, b.netting_set, b.metric, b.q, b.limit, b.first_breach_t_years
        );
    }
    Ok(r.exit_code())
}

fn execute(cli: Cli) -> pfl_core::Result<i32> {
    match cli.command {
        Command::Run(args) => run_scenario(&args, false),
        Command::PlotData(args) => run_scenario(&args, true),
        Command::CheckLimits {
            profiles,
            limits,
            incurred_cva,
            output,
        } => {
            let reports = report::check_limits(&profiles, &limits, incurred_cva)?;
            let text = serde_json::to_string_pretty(&reports)
                .map_err(|e| pfl_core::Error::Numerical(e.to_string()))?;
            match output {
                Some(p) => std::fs::write(&p, text + "\n")
                    .map_err(|e| pfl_core::Error::Io { path: p, source: e })?,
                None => println!("{text}"),
            }
            Ok(if reports.iter().any(|r| r.breached) {
                pfl_core::limits::BREACH_EXIT_CODE
            } else {
                0
            })
        }
        Command::Validate {
            scenario,
            overrides,
        } => {
            let summary = report::validate(&scenario, &overrides)?;
            println!(
                "{} ok: hash {}, {} reporting dates, {} simulation dates",
                summary.scenario,
                summary.scenario_hash,
                summary.n_reporting_dates,
                summary.n_simulation_dates
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
