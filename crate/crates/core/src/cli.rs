//! Command-line front end: `run`, `validate` and `dump-state`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::netsim::{SimError, Simulation};
use crate::scenario::{bundled, Overrides, Scenario, ScenarioError};
use crate::switchfab::Backend;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Group,
    Learn,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Backend {
        match b {
            BackendArg::Group => Backend::GroupTable,
            BackendArg::Learn => Backend::TwoTableLearn,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "selfscale", version, about = "Self-scaling service simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario, writing metrics.csv and summary.txt.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Stop at this simulated time instead of the scenario duration.
        #[arg(long)]
        until: Option<f64>,
    },
    /// Check a scenario and print diagnostics.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Print every host's store and switch state at a simulated time.
    DumpState {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.0)]
        until: f64,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<Scenario, ScenarioError> {
    let overrides = Overrides {
        seed: common.seed,
        backend: common.backend.map(Backend::from),
    };
    let path = Path::new(&common.scenario);
    match bundled(&common.scenario) {
        Some(text) if !path.exists() => Scenario::parse(text, overrides),
        _ => Scenario::load(path, overrides),
    }
}

fn report(diags: &[crate::scenario::Diagnostic]) {
    for d in diags {
        eprintln!("{d}");
    }
}

fn sim_exit(e: &SimError) -> i32 {
    eprintln!("error: {e}");
    match e {
        SimError::Invariant(_) => EXIT_INVARIANT,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` and runs the chosen command, returning the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Validate { common } => match load(&common) {
            Ok(s) => {
                report(&s.diagnostics);
                EXIT_OK
            }
            Err(e) => {
                report(&e.diagnostics);
                EXIT_INVALID
            }
        },
        Command::Run { common, out, until } => {
            let mut scenario = match load(&common) {
                Ok(s) => s,
                Err(e) => {
                    report(&e.diagnostics);
                    return EXIT_INVALID;
                }
            };
            report(&scenario.diagnostics);
            if let Some(t) = until {
                scenario.config.duration = t;
            }
            match run(scenario, &out) {
                Ok(()) => EXIT_OK,
                Err(e) => sim_exit(&e),
            }
        }
        Command::DumpState { common, until, out } => {
            let scenario = match load(&common) {
                Ok(s) => s,
                Err(e) => {
                    report(&e.diagnostics);
                    return EXIT_INVALID;
                }
            };
            report(&scenario.diagnostics);
            if until < 0.0 || until > scenario.config.duration {
                eprintln!("error: --until {until} is outside the run");
                return EXIT_INVALID;
            }
            let dump = match dump_state(scenario, until) {
                Ok(d) => d,
                Err(e) => return sim_exit(&e),
            };
            let written = match out {
                Some(p) => fs::write(&p, dump),
                None => std::io::stdout().write_all(dump.as_bytes()),
            };
            match written {
                Ok(()) => EXIT_OK,
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_FAILURE
                }
            }
        }
    }
}

/// Runs a scenario to its duration, streaming metrics into `out`.
pub fn run(scenario: Scenario, out: &Path) -> Result<(), SimError> {
    fs::create_dir_all(out)?;
    let mut sim = Simulation::new(scenario.config)?;
    sim.set_sink(Box::new(BufWriter::new(File::create(out.join("metrics.csv"))?)))?;
    let result = sim.run();
    let summary = match result {
        Ok(s) => s,
        Err(e) => {
            // Keep whatever metrics were produced before the failure.
            let _ = sim.finish();
            return Err(e);
        }
    };
    fs::write(out.join("summary.txt"), summary.to_text())?;
    print!("{}", summary.to_text());
    Ok(())
}

/// Store and switch dumps of every host after running to `until`.
pub fn dump_state(scenario: Scenario, until: f64) -> Result<String, SimError> {
    let mut sim = Simulation::new(scenario.config)?;
    sim.run_until(until)?;
    Ok(sim.cluster().dump())
}

