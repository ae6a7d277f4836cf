//! `chc`: run chain simulations and the acceptance checks.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chc::report::RunReport;
use chc::scenario::{resolve, BUILTIN};
use chc::verify::{self, Options, CRITERIA};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chc", version, about = "Stateful NF chain simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the built-in scenarios.
    Scenarios,
    /// Writes a scenario's trace (`.csv` or binary, by extension).
    GenTrace {
        /// Scenario file or built-in name.
        scenario: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Runs a scenario and prints its summary.
    Run {
        /// Scenario file or built-in name.
        scenario: String,
        /// Overrides the simulator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Prints only the event-log digest.
        #[arg(long)]
        digest: bool,
        /// Writes the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Writes one line per simulator event.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Directory for `<scenario>.json` reports.
        #[arg(long, env = "CHC_REPORT_DIR")]
        report_dir: Option<PathBuf>,
    },
    /// Runs the acceptance checks; exits 1 when any fails.
    Check {
        /// Criteria to run (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Prints the summary of a saved JSON report.
    Report { path: PathBuf },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("chc: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Scenarios => {
            for (name, _) in BUILTIN {
                println!("{name}");
            }
        }
        Command::GenTrace { scenario, output } => {
            let s = resolve(&scenario).map_err(|e| e.to_string())?;
            let records = s.records().map_err(|e| e.to_string())?;
            chc::trace::save(&output, &records).map_err(|e| format!("{}: {e}", output.display()))?;
            println!("{} records -> {}", records.len(), output.display());
        }
        Command::Run {
            scenario,
            seed,
            digest,
            json,
            events,
            report_dir,
        } => {
            let mut s = resolve(&scenario).map_err(|e| e.to_string())?;
            if let Some(seed) = seed {
                s.sim.seed = seed;
            }
            s.sim.keep_event_lines |= events.is_some();
            let (out, _) = s.run().map_err(|e| e.to_string())?;
            if digest {
                println!("{}", out.report.digest);
            } else {
                print!("{}", out.report.summary());
            }
            if let (Some(path), Some(lines)) = (events, out.event_lines.as_ref()) {
                std::fs::write(&path, lines.concat()).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            if let Some(path) = json {
                write_report(&path, &out.report)?;
            }
            if let Some(dir) = report_dir {
                std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
                write_report(&dir.join(format!("{}.json", out.report.name)), &out.report)?;
            }
        }
        Command::Check { only, seeds, cases } => {
            let opts = Options {
                seeds,
                cases,
                binary: std::env::current_exe().ok(),
            };
            let ids: Vec<u8> = if only.is_empty() { CRITERIA.iter().map(|(i, _)| *i).collect() } else { only };
            let mut failed = 0;
            for id in ids {
                let r = verify::run(id, &opts).ok_or_else(|| format!("no criterion {id}"))?;
                failed += !r.pass as usize;
                println!("{r}");
                std::io::stdout().flush().ok();
            }
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { path } => {
            let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let r: RunReport = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            print!("{}", r.summary());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_report(path: &Path, r: &RunReport) -> Result<(), String> {
    let text = serde_json::to_string_pretty(r).map_err(|e| e.to_string())?;
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}
