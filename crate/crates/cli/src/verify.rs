//! Randomized verification suites.

use clap::ValueEnum;
use serde::Serialize;

use csalloc::allocation::Rule;
use csalloc::properties::{
    check_car_axioms, check_comparison, check_duality, check_risk_axioms, rule_applies_to,
    CarSettings, DriverKind, SuiteReport,
};

use crate::report::{VerifyReport, ENGINE_VERSION, REPORT_SCHEMA_VERSION};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Risk,
    Car,
    Comparison,
    Duality,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Risk => "risk",
            Suite::Car => "car",
            Suite::Comparison => "comparison",
            Suite::Duality => "duality",
            Suite::All => "all",
        }
    }

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

pub fn verify(
    suite: Suite,
    seed: u64,
    count: usize,
    settings: &CarSettings,
) -> Result<VerifyReport, CliError> {
    if count == 0 {
        return Err(CliError::Config("--count must be at least 1".into()));
    }
    let mut reports: Vec<SuiteReport> = Vec::new();
    if suite.includes(Suite::Risk) {
        for kind in DriverKind::ALL {
            reports.push(check_risk_axioms(kind, count, seed)?);
        }
    }
    if suite.includes(Suite::Car) {
        for rule in Rule::ALL {
            for kind in DriverKind::ALL {
                if rule_applies_to(rule, kind) {
                    reports.push(check_car_axioms(rule, kind, count, seed, settings)?);
                }
            }
        }
    }
    if suite.includes(Suite::Comparison) {
        reports.push(check_comparison(count, seed)?);
    }
    if suite.includes(Suite::Duality) {
        for kind in DriverKind::ALL {
            reports.push(check_duality(kind, count, seed)?);
        }
    }
    Ok(VerifyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        engine_version: ENGINE_VERSION,
        suite: suite.name().to_string(),
        seed,
        count,
        passed: reports.iter().all(SuiteReport::passed),
        reports,
    })
}

/// One line per suite plus one line per failed asserted row.
pub fn summary(report: &VerifyReport) -> String {
    let mut out = String::new();
    for r in &report.reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "{status} {} {} ({} instances)\n",
            r.suite, r.subject, r.count
        ));
        for row in r.failures() {
            out.push_str(&format!(
                "  {}: worst violation {:e} exceeds {:e}\n",
                row.check, row.worst, row.tolerance
            ));
        }
    }
    out
}
