//! Executes a run configuration.

use std::time::Instant;

use csalloc::allocation::{
    alloc_aumann_shapley, alloc_cserm, alloc_generalized_marginal, alloc_gradient, alloc_marginal,
    alloc_sub_bsvie, alloc_sub_direct, AllocationResult, AumannShapley, Kappa, Rule, SignVariant,
    DEFAULT_AS_NODES,
};
use csalloc::bsde::risk_measure;
use csalloc::drivers::{BuiltinDriver, ParamField};
use csalloc::lattice::{AdaptedField, LatticeModel, TerminalClaim};

use crate::config::{KappaSpec, RuleConfig, RunConfig, PARTITION_TOL};
use crate::report::{
    ResultDiagnostics, ResultEntry, RunReport, StateValue, ENGINE_VERSION, REPORT_SCHEMA_VERSION,
};
use crate::CliError;

/// Command-line settings that take precedence over the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub sign: Option<SignVariant>,
    pub kappa: Option<KappaSpec>,
    pub deterministic: bool,
}

/// Applies overrides so the echoed configuration reproduces the run.
pub fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) {
    cfg.deterministic |= o.deterministic;
    for r in &mut cfg.rules {
        if let Some(s) = o.sign {
            if r.tag == Rule::SubBsvie {
                r.sign_variant = Some(s);
            }
        }
        if let Some(k) = &o.kappa {
            if r.tag == Rule::Cserm {
                r.kappa = Some(k.clone());
            }
        }
    }
}

struct Context<'a> {
    model: &'a LatticeModel,
    driver: &'a BuiltinDriver,
    y: &'a TerminalClaim,
}

fn allocate(
    ctx: &Context<'_>,
    rule: &RuleConfig,
    x: &TerminalClaim,
) -> Result<AllocationResult, CliError> {
    let Context { model, driver, y } = *ctx;
    Ok(match rule.tag {
        Rule::Sub => alloc_sub_direct(model, driver, x, y)?,
        Rule::SubBsvie => {
            let sign = rule.sign_variant.unwrap_or_default();
            let mut out = alloc_sub_bsvie(model, driver, x, y, sign)?;
            if rule.compare_sign_variants {
                let other = match sign {
                    SignVariant::Corrected => SignVariant::Paper,
                    SignVariant::Paper => SignVariant::Corrected,
                };
                let alt = alloc_sub_bsvie(model, driver, x, y, other)?;
                out.diagnostics.sign_variant_gap = Some(out.values.max_abs_diff(&alt.values));
            }
            out
        }
        Rule::Grad => alloc_gradient(model, driver, x, y)?,
        Rule::Marginal => alloc_marginal(model, driver, x, y)?,
        Rule::GenMarginal => {
            let lambda = rule.lambda.clone().unwrap_or(ParamField::Constant(0.0));
            alloc_generalized_marginal(model, driver, x, y, &lambda)?
        }
        Rule::AumannShapley | Rule::PenalizedAumannShapley => {
            let settings = AumannShapley {
                nodes: rule.nodes.unwrap_or(DEFAULT_AS_NODES),
                penalized: rule.tag == Rule::PenalizedAumannShapley,
                residual: true,
            };
            alloc_aumann_shapley(model, driver, x, y, &settings)?
        }
        Rule::Cserm => {
            let BuiltinDriver::Cserm { beta, gamma } = driver else {
                return Err(CliError::Config(format!(
                    "rule cserm needs a cserm driver, got {}",
                    driver.tag()
                )));
            };
            let kappa = match &rule.kappa {
                Some(k) => k.resolve()?,
                None => Kappa::InverseGamma1,
            };
            alloc_cserm(
                model,
                x,
                y,
                beta,
                *gamma,
                rule.gamma1.unwrap_or(*gamma),
                kappa,
            )?
        }
    })
}

fn entries(
    label: &str,
    values: &AdaptedField,
    times: &[usize],
    diagnostics: &ResultDiagnostics,
) -> Vec<ResultEntry> {
    times
        .iter()
        .map(|&t| ResultEntry {
            rule: label.to_string(),
            t,
            states: values
                .at(t)
                .iter()
                .enumerate()
                .map(|(index, &value)| StateValue { index, value })
                .collect(),
            diagnostics: diagnostics.clone(),
        })
        .collect()
}

fn check_partition(
    model: &LatticeModel,
    y: &TerminalClaim,
    units: &[TerminalClaim],
) -> Result<(), CliError> {
    let mut total = TerminalClaim::zero(model);
    for u in units {
        total = &total + u;
    }
    let mismatch = (&total - y).bound();
    if mismatch > PARTITION_TOL {
        return Err(CliError::Config(format!(
            "sub-units do not add up to the aggregate: max |sum X_i - Y| = {mismatch:e} exceeds {PARTITION_TOL:e}"
        )));
    }
    Ok(())
}

/// Runs every requested rule on every sub-unit.
pub fn run_config(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let model = cfg.model()?;
    let driver = cfg.driver.build()?;
    let y = cfg.claims.aggregate.build(&model, "aggregate")?;
    let units = cfg
        .claims
        .sub_units
        .iter()
        .enumerate()
        .map(|(i, c)| c.build(&model, &format!("sub-unit X{}", i + 1)))
        .collect::<Result<Vec<_>, _>>()?;
    let times = &cfg.output.report_times;
    if let Some(bad) = times.iter().find(|&&t| t > model.steps()) {
        return Err(CliError::Config(format!(
            "report time {bad} is beyond the last step {}",
            model.steps()
        )));
    }
    if cfg.rules.iter().any(RuleConfig::needs_partition) && !units.is_empty() {
        check_partition(&model, &y, &units)?;
    }
    let timed = |start: Instant| (!cfg.deterministic).then(|| start.elapsed().as_secs_f64() * 1e3);

    let mut results = Vec::new();
    let start = Instant::now();
    let rho = risk_measure(&model, &driver, &y)?;
    let diag = ResultDiagnostics {
        elapsed_ms: timed(start),
        ..Default::default()
    };
    results.extend(entries("risk:Y", rho.y(), times, &diag));

    let ctx = Context {
        model: &model,
        driver: &driver,
        y: &y,
    };
    for rule in &cfg.rules {
        let tag = rule.tag.tag();
        let mut total: Option<AdaptedField> = None;
        for (i, x) in units.iter().enumerate() {
            let start = Instant::now();
            let out = allocate(&ctx, rule, x)?;
            let diag = ResultDiagnostics {
                engine: out.diagnostics.clone(),
                elapsed_ms: timed(start),
                ..Default::default()
            };
            results.extend(entries(
                &format!("{tag}:X{}", i + 1),
                &out.values,
                times,
                &diag,
            ));
            total = Some(match total {
                None => out.values,
                Some(acc) => acc.zip_with(&out.values, |a, b| a + b),
            });
        }
        let start = Instant::now();
        let whole = allocate(&ctx, rule, &y)?;
        let mut diag = ResultDiagnostics {
            engine: whole.diagnostics.clone(),
            elapsed_ms: timed(start),
            ..Default::default()
        };
        results.extend(entries(&format!("{tag}:Y"), &whole.values, times, &diag));
        if let Some(total) = total {
            diag.full_allocation_residual = Some(total.max_abs_diff(&whole.values));
            diag.engine = Default::default();
            diag.elapsed_ms = None;
            results.extend(entries(&format!("{tag}:total"), &total, times, &diag));
        }
    }
    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        engine_version: ENGINE_VERSION,
        config: cfg.clone(),
        results,
    })
}
