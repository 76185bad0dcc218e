//! `sphereflow` — run the checks and constructions of a scenario file and
//! write JSON/CSV reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 a check did not meet its acceptance threshold.

mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sphereflow::diagnostics;
use sphereflow::scenario::{validate_ladder, Scenario, Setup};
use sphereflow::Error;

use report::{combined, config_hash, Report};

#[derive(Parser, Debug)]
#[command(name = "sphereflow", version, about = "Small-sphere mean curvature flows along scalar-curvature gradient lines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Expansion order N (overrides the scenario).
    #[arg(long, global = true)]
    order: Option<usize>,
    /// Comma-separated decreasing scale ladder (overrides the scenario).
    #[arg(long, global = true, value_delimiter = ',')]
    ladder: Option<Vec<f64>>,
    /// Output directory for reports (overrides the scenario).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Quadrature moments on S² and S³ against closed forms.
    Moments,
    /// Normal-coordinate and mean-curvature expansions.
    VerifyTaylor,
    /// Critical points and the gradient line of the scalar curvature.
    Flowline,
    /// Bianchi projection identities along the flow line.
    Bianchi,
    /// Substitution checks of the band and P Green solvers.
    Greens,
    /// Build the expansion and measure its residual decay.
    Expand,
    /// Newton refinement from the partial sums.
    Refine,
    /// Every command above.
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Moments => "moments",
            Command::VerifyTaylor => "verify-taylor",
            Command::Flowline => "flowline",
            Command::Bianchi => "bianchi",
            Command::Greens => "greens",
            Command::Expand => "expand",
            Command::Refine => "refine",
            Command::All => "all",
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

/// Failure of a run, mapped onto an exit code.
enum Failure {
    Config(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_input() {
            Failure::Config(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Numerical(format!("report serialization failed: {e}"))
    }
}

/// Scenario with command-line overrides applied and validated.
fn effective_scenario(cli: &Cli) -> Result<Scenario, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::Config("--config <FILE> is required".into()))?;
    let mut sc = Scenario::load(path)?;
    if let Some(order) = cli.order {
        sc.expansion.order = order;
    }
    if let Some(ladder) = &cli.ladder {
        validate_ladder(ladder)?;
        sc.expansion.ladder = ladder.clone();
    }
    if let Some(out) = &cli.out {
        sc.output.dir = out.to_string_lossy().into_owned();
    }
    sc.validate()?;
    Ok(sc)
}

struct Runner {
    scenario: Scenario,
    hash: String,
    setup: Option<Setup>,
}

impl Runner {
    fn setup(&mut self) -> Result<&Setup, Failure> {
        if self.setup.is_none() {
            self.setup = Some(self.scenario.setup()?);
        }
        Ok(self.setup.as_ref().expect("just built"))
    }

    fn report<T: Serialize>(&self, command: Command, pass: bool, data: &T) -> Result<Report, Failure> {
        Ok(Report::new(command.name(), &self.hash, pass, data)?)
    }

    fn run(&mut self, command: Command) -> Result<Report, Failure> {
        match command {
            Command::Moments => {
                let r = diagnostics::moments(&self.scenario)?;
                self.report(command, r.pass, &r)
            }
            Command::VerifyTaylor => {
                let sc = self.scenario.clone();
                let r = diagnostics::taylor(&sc, self.setup()?)?;
                self.report(command, r.pass, &r)
            }
            Command::Flowline => {
                let sc = self.scenario.clone();
                let r = diagnostics::flowline(&sc, self.setup()?)?;
                self.report(command, r.pass, &r)
            }
            Command::Bianchi => {
                let r = diagnostics::bianchi(self.setup()?, 10)?;
                self.report(command, r.pass, &r)
            }
            Command::Greens => {
                let sc = self.scenario.clone();
                let r = diagnostics::greens(&sc, self.setup()?)?;
                self.report(command, r.pass, &r)
            }
            Command::Expand => {
                let sc = self.scenario.clone();
                let setup = self.setup()?;
                let engine = setup.engine(&sc)?;
                let r = diagnostics::expand(&engine, sc.expansion.order)?;
                self.report(command, r.pass, &r)
            }
            Command::Refine => {
                let sc = self.scenario.clone();
                let order = sc.expansion.order.max(1);
                let r = diagnostics::refine(&sc, self.setup()?, order)?;
                self.report(command, r.pass, &r)
            }
            Command::All => unreachable!("expanded by the caller"),
        }
    }
}

fn execute(cli: &Cli) -> Result<bool, Failure> {
    let scenario = effective_scenario(cli)?;
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(Failure::Config("--threads must be ≥ 1".into()));
        }
        sphereflow::par::set_threads(k);
    }
    let hash = config_hash(&scenario.to_toml());
    let out = PathBuf::from(&scenario.output.dir);
    let commands: Vec<Command> = if cli.command == Command::All {
        vec![
            Command::Moments,
            Command::VerifyTaylor,
            Command::Flowline,
            Command::Bianchi,
            Command::Greens,
            Command::Expand,
            Command::Refine,
        ]
    } else {
        vec![cli.command]
    };
    let mut runner = Runner { scenario, hash: hash.clone(), setup: None };
    let mut reports = Vec::new();
    for command in commands {
        let start = Instant::now();
        let report = runner.run(command)?;
        let files = report.write(&out).map_err(|e| Failure::Config(format!("cannot write reports to {}: {e}", out.display())))?;
        println!(
            "{:<14} {}  ({:.1} s) -> {}",
            command.name(),
            if report.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            files[0].display()
        );
        reports.push(report);
    }
    if cli.command == Command::All {
        let doc = combined(&reports, &hash);
        let all = Report { command: "all".into(), pass: reports.iter().all(|r| r.pass), document: doc };
        all.write(&out).map_err(|e| Failure::Config(format!("cannot write reports to {}: {e}", out.display())))?;
    }
    Ok(reports.iter().all(|r| r.pass))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: at least one check failed its acceptance threshold");
            ExitCode::from(EXIT_ACCEPTANCE)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}
