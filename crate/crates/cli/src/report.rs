//! Report documents and their JSON and CSV encodings.

use std::io::Write;

use serde::Serialize;

use csalloc::allocation::Diagnostics;
use csalloc::properties::SuiteReport;

use crate::config::RunConfig;
use crate::CliError;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateValue {
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ResultDiagnostics {
    #[serde(flatten)]
    pub engine: Diagnostics,
    /// `max |sum_i Lambda(X_i, Y) - Lambda(Y, Y)|` over all steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_allocation_residual: Option<f64>,
    /// Wall-clock time; omitted in deterministic mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultEntry {
    /// `<rule tag>:<unit>`, where the unit is `Y`, `X1`, `X2`, ... or `total`.
    pub rule: String,
    pub t: usize,
    pub states: Vec<StateValue>,
    pub diagnostics: ResultDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub engine_version: &'static str,
    pub config: RunConfig,
    pub results: Vec<ResultEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub engine_version: &'static str,
    pub suite: String,
    pub seed: u64,
    pub count: usize,
    pub passed: bool,
    pub reports: Vec<SuiteReport>,
}

pub fn to_json<T: Serialize>(doc: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(doc)
        .map_err(|e| CliError::Config(format!("report encoding failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn to_csv(report: &RunReport) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Config(format!("report encoding failed: {e}"));
    w.write_record(["rule", "t", "state", "value"])
        .map_err(fail)?;
    for r in &report.results {
        for s in &r.states {
            w.write_record([
                r.rule.clone(),
                r.t.to_string(),
                s.index.to_string(),
                s.value.to_string(),
            ])
            .map_err(fail)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Config(format!("report encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn emit(text: &str, path: Option<&std::path::Path>) -> Result<(), CliError> {
    match path {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| CliError::io(format!("writing {}", p.display()), e))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io("writing stdout", e)),
    }
}
