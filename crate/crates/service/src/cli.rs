//! `cryoloop` command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 malformed input (with line and
//! column), 3 physics or validation failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cryoloop::scenario::{Scenario, ScenarioError};
use cryoloop::telemetry::{read_csv, to_csv_string};

use crate::api::{serve, ServiceConfig};
use crate::estimate::{estimate, render, StepFile};
use crate::files::{write_atomic, ActionLog};
use crate::report::{run_summary, steady_table};

#[derive(Debug, Parser)]
#[command(name = "cryoloop", version, about = "Closed-loop cryogenic helium plant simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write its telemetry CSV.
    Simulate {
        /// Scenario file.
        #[arg(env = "CRYOLOOP_CONFIG")]
        scenario: PathBuf,
        /// Override a scenario value, e.g. `--set rpm=0` or `--set initial.pressure_bar=22`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Action log to append as events; its clock sets the duration.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Output CSV; defaults to the scenario's `csv_path`, then `<scenario>.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Solve the steady state and print the sensor table.
    Steady {
        #[arg(env = "CRYOLOOP_CONFIG")]
        scenario: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// JSON report; defaults to the scenario's `report_path`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Estimate flows and passive loads from a telemetry CSV.
    Estimate {
        telemetry: PathBuf,
        /// Step annotation file (TOML).
        steps: PathBuf,
    },
    /// Serve interactive sessions over HTTP.
    Serve {
        #[arg(long, env = "CRYOLOOP_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory for stored runs.
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        /// Scenario used for sessions created without one.
        #[arg(long, env = "CRYOLOOP_CONFIG")]
        scenario: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ScenarioError },
    #[error(transparent)]
    Physics(#[from] cryoloop::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Parse {
                source: ScenarioError::Invalid(_),
                ..
            } => 3,
            CliError::Parse { .. } => 2,
            CliError::Physics(_) => 3,
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    write_atomic(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_scenario(path: &Path, overrides: &[String]) -> Result<Scenario, CliError> {
    Scenario::parse_with_overrides(&read(path)?, overrides).map_err(|source| CliError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn default_csv(scenario_path: &Path) -> PathBuf {
    let stem = scenario_path
        .file_stem()
        .map_or("telemetry".into(), |s| s.to_string_lossy());
    PathBuf::from(format!("{stem}.csv"))
}

/// Runs one command, returning what it printed.
pub fn execute(command: Command) -> Result<String, CliError> {
    match command {
        Command::Simulate {
            scenario: path,
            overrides,
            events,
            csv,
        } => {
            let mut scenario = load_scenario(&path, &overrides)?;
            if let Some(log_path) = events {
                let log =
                    ActionLog::parse(&read(&log_path)?).map_err(|source| CliError::Parse { path: log_path, source })?;
                log.apply_to(&mut scenario);
            }
            let run = scenario.run()?;
            let out = csv
                .or_else(|| scenario.outputs.csv_path.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| default_csv(&path));
            write(&out, to_csv_string(&run.frames).as_bytes())?;
            Ok(format!("{}telemetry written to {}\n", run_summary(&run), out.display()))
        }
        Command::Steady {
            scenario: path,
            overrides,
            report,
        } => {
            let scenario = load_scenario(&path, &overrides)?;
            let r = scenario.solve_steady()?;
            let mut text = steady_table(&r);
            if let Some(out) = report.or_else(|| scenario.outputs.report_path.as_ref().map(PathBuf::from)) {
                let json = serde_json::to_string_pretty(&r).expect("reports serialize to JSON");
                write(&out, json.as_bytes())?;
                text += &format!("report written to {}\n", out.display());
            }
            Ok(text)
        }
        Command::Estimate { telemetry, steps } => {
            let frames = read_csv(read(&telemetry)?.as_bytes())?;
            let annotations =
                StepFile::parse(&read(&steps)?).map_err(|source| CliError::Parse { path: steps, source })?;
            Ok(render(&estimate(&frames, &annotations)?))
        }
        Command::Serve {
            port,
            host,
            runs_dir,
            scenario,
        } => {
            let default_scenario = match scenario {
                Some(p) => {
                    // Fail at start-up rather than on the first request.
                    load_scenario(&p, &[])?;
                    Some(read(&p)?)
                }
                None => None,
            };
            let config = ServiceConfig {
                runs_dir,
                default_scenario,
                ..Default::default()
            };
            let addr = format!("{host}:{port}");
            let io = |source| CliError::Io {
                path: PathBuf::from(&addr),
                source,
            };
            let rt = tokio::runtime::Runtime::new().map_err(io)?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                log::info!("listening on {}", listener.local_addr()?);
                serve(listener, config).await
            })
            .map_err(io)?;
            Ok(String::new())
        }
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
