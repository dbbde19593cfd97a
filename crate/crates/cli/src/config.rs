//! Run configuration read from JSON.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use csalloc::allocation::{Kappa, Rule, SignVariant};
use csalloc::drivers::{BuiltinDriver, ParamField};
use csalloc::lattice::{LatticeModel, Layout, TerminalClaim};

use crate::expr::Expr;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
/// Largest step count for per-path claim tables.
pub const MAX_TABLE_STEPS: usize = 12;
/// Tolerance of `sum X_i = Y` for partition-based rules.
pub const PARTITION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub driver: DriverConfig,
    pub claims: ClaimsConfig,
    #[serde(default)]
    pub rules: Vec<RuleConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "T", alias = "horizon")]
    pub horizon: f64,
    pub steps: usize,
    #[serde(default = "default_layout")]
    pub layout: Layout,
}

fn default_layout() -> Layout {
    Layout::Node
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverConfig {
    Zero,
    LinearAmbiguous {
        r: ParamField,
        #[serde(rename = "R")]
        big_r: ParamField,
    },
    Entropic {
        gamma: f64,
    },
    Cserm {
        #[serde(default = "zero_field")]
        beta: ParamField,
        gamma: f64,
    },
    LinearGeneric {
        beta: ParamField,
        lambda: ParamField,
    },
}

fn zero_field() -> ParamField {
    ParamField::Constant(0.0)
}

impl DriverConfig {
    pub fn build(&self) -> Result<BuiltinDriver, CliError> {
        Ok(match self {
            DriverConfig::Zero => BuiltinDriver::Zero,
            DriverConfig::LinearAmbiguous { r, big_r } => {
                BuiltinDriver::linear_ambiguous(r.clone(), big_r.clone())
            }
            DriverConfig::Entropic { gamma } => BuiltinDriver::entropic(*gamma)?,
            DriverConfig::Cserm { beta, gamma } => BuiltinDriver::cserm(beta.clone(), *gamma)?,
            DriverConfig::LinearGeneric { beta, lambda } => {
                BuiltinDriver::linear_generic(beta.clone(), lambda.clone())
            }
        })
    }
}

/// A claim as an expression in `B_T` or as one value per path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClaimSpec {
    Expression(String),
    Table { table: Vec<f64> },
}

impl ClaimSpec {
    pub fn build(&self, model: &LatticeModel, what: &str) -> Result<TerminalClaim, CliError> {
        let claim = match self {
            ClaimSpec::Expression(src) => {
                let e = Expr::parse(src).map_err(|e| CliError::Config(format!("{what}: {e}")))?;
                model.claim_of_terminal(|b| e.eval(b))
            }
            ClaimSpec::Table { table } => {
                if model.layout() != Layout::Path || model.steps() > MAX_TABLE_STEPS {
                    return Err(CliError::Config(format!(
                        "{what}: per-path tables need the path layout with at most {MAX_TABLE_STEPS} steps"
                    )));
                }
                let claim = TerminalClaim::new(table.clone());
                claim.check_shape(model)?;
                claim
            }
        };
        if !claim.is_finite() {
            return Err(CliError::Config(format!("{what} has non-finite values")));
        }
        Ok(claim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimsConfig {
    pub aggregate: ClaimSpec,
    #[serde(default)]
    pub sub_units: Vec<ClaimSpec>,
}

/// `kappa` as `"1/g1"`, `"2/g1"` or a positive number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KappaSpec {
    Value(f64),
    Text(String),
}

impl KappaSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        match text {
            "1/g1" | "2/g1" => Ok(KappaSpec::Text(text.to_string())),
            _ => text.parse::<f64>().map(KappaSpec::Value).map_err(|_| {
                CliError::Config(format!(
                    "kappa must be 1/g1, 2/g1 or a number, got '{text}'"
                ))
            }),
        }
    }

    pub fn resolve(&self) -> Result<Kappa, CliError> {
        match self {
            KappaSpec::Value(v) => Ok(Kappa::Value(*v)),
            KappaSpec::Text(t) if t == "1/g1" => Ok(Kappa::InverseGamma1),
            KappaSpec::Text(t) if t == "2/g1" => Ok(Kappa::TwiceInverseGamma1),
            KappaSpec::Text(t) => Self::parse(t)?.resolve(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConfig {
    pub tag: Rule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign_variant: Option<SignVariant>,
    /// Also run the other sign variant and report the gap.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub compare_sign_variants: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<ParamField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<KappaSpec>,
}

impl RuleConfig {
    /// Rules whose axioms quantify over a partition of the aggregate.
    pub fn needs_partition(&self) -> bool {
        matches!(
            self.tag,
            Rule::Sub | Rule::SubBsvie | Rule::Grad | Rule::AumannShapley
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub format: Format,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "default_times")]
    pub report_times: Vec<usize>,
}

fn default_times() -> Vec<usize> {
    vec![0]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            format: Format::Json,
            path: None,
            report_times: default_times(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn model(&self) -> Result<LatticeModel, CliError> {
        Ok(LatticeModel::with(
            self.model.horizon,
            self.model.steps,
            self.model.layout,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "model": {"T": 1.0, "steps": 2, "layout": "path"},
        "driver": {"type": "linear_ambiguous", "r": 0.05, "R": [0.1, 0.2]},
        "claims": {"aggregate": "-B_T", "sub_units": ["-B_T/2", {"table": [0, 1, 2, 3]}]},
        "rules": [{"tag": "as", "nodes": 8}, {"tag": "cserm", "kappa": "2/g1"}]
    }"#;

    #[test]
    fn parses_and_echoes() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.rules[0].tag, Rule::AumannShapley);
        assert_eq!(cfg.output.report_times, vec![0]);
        assert_eq!(
            cfg.rules[1].kappa.as_ref().unwrap().resolve().unwrap(),
            Kappa::TwiceInverseGamma1
        );
        let echo = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&echo).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_fields_and_versions() {
        let bad = MINIMAL
            .replace("\"seed\"", "\"seeed\"")
            .replace("\"rules\"", "\"rulez\"");
        assert!(matches!(
            RunConfig::from_json(&bad),
            Err(CliError::Config(_))
        ));
        let v2 = MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(
            RunConfig::from_json(&v2),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn tables_need_small_path_lattices() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        let m = cfg.model().unwrap();
        let t = cfg.claims.sub_units[1].build(&m, "unit").unwrap();
        assert_eq!(t.values(), &[0.0, 1.0, 2.0, 3.0]);
        let node = LatticeModel::with(1.0, 3, Layout::Node).unwrap();
        assert!(cfg.claims.sub_units[1].build(&node, "unit").is_err());
    }

    #[test]
    fn kappa_text() {
        assert_eq!(
            KappaSpec::parse("0.7").unwrap().resolve().unwrap(),
            Kappa::Value(0.7)
        );
        assert!(KappaSpec::parse("g1").is_err());
    }
}
