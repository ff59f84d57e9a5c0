//! `quditsense` — command-line front end for the qudit sensing simulator.
//!
//! Usage: `quditsense <command> [--config <file>] [--output <dir>]`
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.
//! The worker-thread count for sweeps honors `QUDITSENSE_WORKERS`.

mod config;
mod error;
mod output;
mod svg;
mod verbs;

use std::path::PathBuf;
use std::process::ExitCode;

use config::ExperimentConfig;
use error::{CliError, Result};

const USAGE: &str = "usage: quditsense <command> [--config <file>] [--output <dir>]

commands:
  simulate-qubit   two-level Rabi baseline run
  optimize-code    codeword search for the configured qudit
  compile-pulses   code search plus drive-schedule synthesis
  run-protocol     full sensing run (two-level or logical, per config)
  calibrate        crossing-time calibration over the field sweep grid
  sensitivity      calibration plus sensitivity curve and optimum
  sweep-delta      figure of merit versus sensing-window length
  validate-frames  lab-frame vs rotating-frame cross-check (two-level)
  tables-check     report on the bundled reference tabulations

options:
  --config <file>  experiment description (defaults apply when omitted)
  --output <dir>   output directory (overrides the [output] section)
  --help           print this help

environment:
  QUDITSENSE_WORKERS  worker threads for parallel sweeps";

struct Args {
    verb: String,
    config: Option<PathBuf>,
    output: Option<PathBuf>,
}

fn parse_args(argv: &[String]) -> Result<Option<Args>> {
    if argv.is_empty() || argv.iter().any(|a| a == "--help" || a == "-h") {
        return Ok(None);
    }
    let verb = argv[0].clone();
    if verb.starts_with('-') {
        return Err(CliError::Config(format!(
            "expected a command first, got {verb:?}"
        )));
    }
    let mut config = None;
    let mut output = None;
    let mut it = argv[1..].iter();
    while let Some(flag) = it.next() {
        let slot = match flag.as_str() {
            "--config" => &mut config,
            "--output" => &mut output,
            other => {
                return Err(CliError::Config(format!("unknown option {other:?}")));
            }
        };
        let value = it
            .next()
            .ok_or_else(|| CliError::Config(format!("{flag} needs a value")))?;
        if slot.replace(PathBuf::from(value)).is_some() {
            return Err(CliError::Config(format!("{flag} given twice")));
        }
    }
    Ok(Some(Args {
        verb,
        config,
        output,
    }))
}

fn configure_workers() -> Result<()> {
    if let Ok(raw) = std::env::var("QUDITSENSE_WORKERS") {
        let n: usize = raw.parse().map_err(|_| {
            CliError::Config(format!(
                "QUDITSENSE_WORKERS must be a positive integer, got {raw:?}"
            ))
        })?;
        if n == 0 {
            return Err(CliError::Config(
                "QUDITSENSE_WORKERS must be at least 1".into(),
            ));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size worker pool: {e}")))?;
    }
    Ok(())
}

fn load_config(args: &Args) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            ExperimentConfig::parse(&text)?
        }
        None => {
            let cfg = ExperimentConfig::defaults(0.5);
            cfg.validate()?;
            cfg
        }
    };
    if let Some(dir) = &args.output {
        cfg.directory = dir.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn run(argv: &[String]) -> Result<bool> {
    let Some(args) = parse_args(argv)? else {
        return Ok(false);
    };
    configure_workers()?;
    let cfg = load_config(&args)?;
    let dir = PathBuf::from(&cfg.directory);
    verbs::run(&args.verb, &cfg, &dir)?;
    Ok(true)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            println!("{USAGE}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("quditsense: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
