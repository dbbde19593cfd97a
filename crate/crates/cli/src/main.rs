//! `csalloc`: risk and capital allocation runs from a JSON configuration, plus
//! randomized verification of the engine's axioms.

mod config;
mod error;
mod expr;
mod report;
mod run;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use csalloc::allocation::SignVariant;
use csalloc::properties::CarSettings;

use config::{Format, KappaSpec, RunConfig};
use error::CliError;
use run::Overrides;
use verify::Suite;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SignArg {
    Corrected,
    Paper,
}

impl From<SignArg> for SignVariant {
    fn from(s: SignArg) -> Self {
        match s {
            SignArg::Corrected => SignVariant::Corrected,
            SignArg::Paper => SignVariant::Paper,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "csalloc",
    version,
    about = "Cash-subadditive risk measures and capital allocation on a binomial lattice"
)]
struct Args {
    /// Run configuration (JSON).
    #[arg(
        long,
        value_name = "PATH",
        required_unless_present = "verify",
        conflicts_with = "verify"
    )]
    config: Option<PathBuf>,

    /// Run a randomized verification suite instead of a configuration.
    #[arg(long, value_enum, value_name = "SUITE")]
    verify: Option<Suite>,

    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Instances per verification suite.
    #[arg(long, default_value_t = 100)]
    count: usize,

    /// Omit wall-clock timings so reports are byte-identical across runs.
    #[arg(long)]
    deterministic: bool,

    /// Sign of the Volterra subdifferential driver.
    #[arg(long, value_enum)]
    sign_variant: Option<SignArg>,

    /// Linearization coefficient of the entropic rule: 1/g1, 2/g1 or a number.
    #[arg(long)]
    kappa: Option<String>,

    /// Report path; overrides the configured output path.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

fn run_with_config(args: &Args, path: &PathBuf) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let mut cfg = RunConfig::from_json(&text)?;
    let overrides = Overrides {
        sign: args.sign_variant.map(Into::into),
        kappa: args.kappa.as_deref().map(KappaSpec::parse).transpose()?,
        deterministic: args.deterministic,
    };
    run::apply_overrides(&mut cfg, &overrides);
    let report = run::run_config(&cfg)?;
    let text = match cfg.output.format {
        Format::Json => report::to_json(&report)?,
        Format::Csv => report::to_csv(&report)?,
    };
    report::emit(&text, args.report.as_deref().or(cfg.output.path.as_deref()))
}

fn run_verify(args: &Args, suite: Suite) -> Result<(), CliError> {
    let settings = CarSettings {
        sign: args.sign_variant.map(Into::into).unwrap_or_default(),
        kappa: match args.kappa.as_deref() {
            Some(k) => KappaSpec::parse(k)?.resolve()?,
            None => Default::default(),
        },
    };
    let report = verify::verify(suite, args.seed, args.count, &settings)?;
    print!("{}", verify::summary(&report));
    if let Some(path) = &args.report {
        report::emit(&report::to_json(&report)?, Some(path))?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Verify(format!(
            "{} suite has failing checks",
            suite.name()
        )))
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let outcome = match (&args.config, args.verify) {
        (_, Some(suite)) => run_verify(&args, suite),
        (Some(path), None) => run_with_config(&args, path),
        (None, None) => Err(CliError::Config(
            "either --config or --verify is required".into(),
        )),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("csalloc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
