use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use damt::discovery::MethodId;
use damt::experiments::{default_workers, read_csv, report_check, run_scenarios, sweep, write_csv, Scale};
use damt::scenario::{Scenario, ScenarioFile};
use damt::Error;

#[derive(Parser)]
#[command(name = "damt", version, about = "Semantic data-source discovery simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario of a config file and write one CSV row per
    /// method and repetition.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repetitions: Option<usize>,
        /// CSV destination; standard output when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
    },
    /// Run the parameter grid of one experiment (fig5, fig6, fig8, fig9,
    /// fig10, fig11).
    Sweep {
        #[arg(short, long)]
        figure: String,
        #[arg(long, default_value = "desk")]
        scale: Scale,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
        /// Write the grid as a config file instead of running it.
        #[arg(long)]
        emit_config: bool,
    },
    /// Evaluate the trend assertions on a result CSV.
    Check { csv: PathBuf },
    /// Run one method of the first scenario with tracing and write the
    /// trace as newline-delimited JSON.
    TraceDump {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        method: Option<MethodId>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ScenarioInvalid { ref field, .. } if field.starts_with("scenario ") => Failure::Runtime(e.to_string()),
            Error::ScenarioInvalid { .. } | Error::UnknownFigure(_) | Error::SchemaMismatch(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>, repetitions: Option<usize>) -> Result<Vec<Scenario>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut file = ScenarioFile::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    for s in &mut file.scenarios {
        if let Some(seed) = seed {
            s.seed = seed;
        }
        if let Some(r) = repetitions {
            s.repetitions = r;
        }
        s.validate()?;
    }
    Ok(file.scenarios)
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_and_write(scenarios: &[Scenario], output: Option<&Path>, workers: usize) -> Result<(), Failure> {
    let rows = run_scenarios(scenarios, workers)?;
    let mut out = open_output(output)?;
    write_csv(&mut out, &rows)?;
    out.flush().map_err(|e| Failure::Runtime(e.to_string()))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            seed,
            repetitions,
            output,
            workers,
        } => {
            let scenarios = load_config(&config, seed, repetitions)?;
            let output = output.or_else(|| scenarios.iter().find_map(|s| s.output.clone()));
            run_and_write(&scenarios, output.as_deref(), workers)
        }
        Command::Sweep {
            figure,
            scale,
            seed,
            repetitions,
            output,
            workers,
            emit_config,
        } => {
            let mut scenarios = sweep(&figure, scale, seed)?;
            if let Some(r) = repetitions {
                scenarios.iter_mut().for_each(|s| s.repetitions = r);
            }
            if emit_config {
                let mut out = open_output(output.as_deref())?;
                let text = ScenarioFile { scenarios }.to_toml();
                return out
                    .write_all(text.as_bytes())
                    .and_then(|_| out.flush())
                    .map_err(|e| Failure::Runtime(e.to_string()));
            }
            run_and_write(&scenarios, output.as_deref(), workers)
        }
        Command::Check { csv } => {
            let file = File::open(&csv).map_err(|e| Failure::Config(format!("{}: {e}", csv.display())))?;
            let rows = read_csv(file)?;
            let report = report_check(&rows);
            print!("{report}");
            if report.passed() {
                println!("check passed");
                Ok(())
            } else {
                println!("check failed: {} assertion(s) violated", report.failures().count().max(1));
                Err(Failure::Check)
            }
        }
        Command::TraceDump {
            config,
            method,
            seed,
            output,
        } => {
            let scenarios = load_config(&config, seed, None)?;
            let scenario = scenarios
                .first()
                .ok_or_else(|| Failure::Config("config holds no scenarios".into()))?;
            let method = method.unwrap_or(scenario.methods[0]);
            let mut sim = scenario
                .build(method, 0)
                .map_err(|e| Failure::Runtime(format!("scenario {}: {e}", scenario.fingerprint())))?;
            sim.enable_trace();
            let ledger = sim.run();
            let mut out = open_output(output.as_deref())?;
            for rec in ledger.trace.iter().flatten() {
                let line = serde_json::to_string(rec).map_err(|e| Failure::Runtime(e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            out.flush().map_err(|e| Failure::Runtime(e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("runtime error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check) => ExitCode::from(3),
    }
}
