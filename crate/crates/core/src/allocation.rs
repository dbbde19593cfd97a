//! Capital allocation rules `Lambda_t(X, Y)` for a sub-unit `X` of an aggregate `Y`.
//!
//! Every rule returns a value field on steps `0..=N`. The subdifferential rule is
//! available in two independent forms: a pathwise scenario sum and the
//! anchor-indexed Volterra equation
//! `eta_k(i) = E[eta_{k+1}(i) | F_k] + (-D(i, k + 1) G_k - mu_k zeta_k(i)) delta`,
//! `eta_N(i) = -D(i, N) X`, whose diagonal must reproduce the pathwise sum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{risk_measure, BsdeSolution};
use crate::bsvie::{solve_bsvie, BsvieSolution, FamilyFn, VolterraDriver};
use crate::drivers::{BuiltinDriver, Driver, ParamField, StateRef};
use crate::error::{Error, Result};
use crate::lattice::{AdaptedField, LatticeModel, Layout, TerminalClaim};
use crate::quadrature::gauss_legendre_unit;
use crate::scenario::{
    discount_between, discounted_expectation_field, dual_check, extract_scenario, pathwise_sweep,
    penalty_field, Scenario,
};

/// Default number of Gauss–Legendre nodes for Aumann–Shapley rules.
pub const DEFAULT_AS_NODES: usize = 16;
/// Default central-difference step of the gradient oracle.
pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// Allocation rule identifiers used in reports and configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Sub,
    SubBsvie,
    Grad,
    Marginal,
    GenMarginal,
    #[serde(rename = "as")]
    AumannShapley,
    #[serde(rename = "p_as")]
    PenalizedAumannShapley,
    Cserm,
}

impl Rule {
    pub const ALL: [Rule; 8] = [
        Rule::Sub,
        Rule::SubBsvie,
        Rule::Grad,
        Rule::Marginal,
        Rule::GenMarginal,
        Rule::AumannShapley,
        Rule::PenalizedAumannShapley,
        Rule::Cserm,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Rule::Sub => "sub",
            Rule::SubBsvie => "sub_bsvie",
            Rule::Grad => "grad",
            Rule::Marginal => "marginal",
            Rule::GenMarginal => "gen_marginal",
            Rule::AumannShapley => "as",
            Rule::PenalizedAumannShapley => "p_as",
            Rule::Cserm => "cserm",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Rule> {
        Rule::ALL.into_iter().find(|r| r.tag() == tag)
    }
}

/// Sign of the conjugate and drift terms in the subdifferential Volterra driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignVariant {
    /// `-D(i, k + 1) G_k - mu_k z`.
    #[default]
    Corrected,
    /// `+D(i, k + 1) G_k + mu_k z`.
    Paper,
}

/// Coefficient multiplying `Z^{gamma1}` in the linearized entropic driver.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Kappa {
    /// `1 / gamma1`, the derivative of `z^2 / (2 gamma1)` divided by `z`.
    #[default]
    InverseGamma1,
    TwiceInverseGamma1,
    Value(f64),
}

impl Kappa {
    pub fn resolve(self, gamma1: f64) -> Result<f64> {
        let k = match self {
            Kappa::InverseGamma1 => 1.0 / gamma1,
            Kappa::TwiceInverseGamma1 => 2.0 / gamma1,
            Kappa::Value(v) => v,
        };
        if k.is_finite() && k > 0.0 {
            Ok(k)
        } else {
            Err(Error::Config(format!("kappa must be positive, got {k}")))
        }
    }
}

/// Numerical side information attached to an allocation.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dual_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_method_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadrature_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadrature_nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// `max |Lambda^corrected - Lambda^paper|` of the Volterra rule, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sign_variant_gap: Option<f64>,
}

/// Allocation values on steps `0..=N` with optional Volterra fields.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    pub rule: Rule,
    pub values: AdaptedField,
    pub volterra: Option<BsvieSolution>,
    pub diagnostics: Diagnostics,
}

impl AllocationResult {
    fn new(rule: Rule, values: AdaptedField) -> Self {
        Self {
            rule,
            values,
            volterra: None,
            diagnostics: Diagnostics::default(),
        }
    }

    /// `Lambda_0` at the root.
    pub fn root(&self) -> f64 {
        self.values.get(0, 0)
    }

    pub fn at(&self, t: usize) -> &[f64] {
        self.values.at(t)
    }
}

/// Risk measure of the aggregate and its optimal scenario.
pub struct Aggregate {
    pub rho: BsdeSolution,
    pub scenario: Scenario,
}

pub fn aggregate(
    model: &LatticeModel,
    driver: &dyn Driver,
    y: &TerminalClaim,
) -> Result<Aggregate> {
    let rho = risk_measure(model, driver, y)?;
    let scenario = extract_scenario(model, driver, &rho)?;
    Ok(Aggregate { rho, scenario })
}

fn difference(a: &AdaptedField, b: &AdaptedField) -> AdaptedField {
    a.zip_with(b, |u, v| u - v)
}

/// `E^mu[D(t, N) (-X) | F_t]`, minus `c_t` when `penalized`, on all steps.
fn scenario_values(
    model: &LatticeModel,
    scenario: &Scenario,
    x: &TerminalClaim,
    penalized: bool,
) -> Result<AdaptedField> {
    let neg = -x;
    match model.layout() {
        Layout::Path => {
            let sw = pathwise_sweep(model, scenario, &neg, 0)?;
            Ok(if penalized {
                difference(&sw.expectation, &sw.penalty)
            } else {
                sw.expectation
            })
        }
        Layout::Node => {
            let e = discounted_expectation_field(model, scenario, &neg, 0)?;
            if penalized {
                Ok(difference(&e, &penalty_field(model, scenario, 0)?))
            } else {
                Ok(e)
            }
        }
    }
}

/// `D(0, k)` on steps `0..=N`; the node layout needs a state-independent rate.
fn cumulative_discount(model: &LatticeModel, scenario: &Scenario) -> Result<AdaptedField> {
    let n = model.steps();
    let mut rows: Vec<Vec<f64>> = vec![vec![1.0]];
    for k in 0..n {
        let prev = &rows[k];
        let row = match model.layout() {
            Layout::Path => (0..model.state_count(k + 1))
                .map(|s| {
                    let a = model.ancestor(k, s);
                    prev[a] * scenario.step_discount(k, a)
                })
                .collect(),
            Layout::Node => {
                let d = discount_between(model, scenario, k, k + 1)?[0];
                vec![prev[0] * d; k + 2]
            }
        };
        rows.push(row);
    }
    Ok(AdaptedField::new(0, rows))
}

/// Subdifferential Volterra driver for a given scenario and sign convention.
struct SubDriver<'a> {
    model: &'a LatticeModel,
    scenario: &'a Scenario,
    cumulative: &'a AdaptedField,
    sign: f64,
}

impl SubDriver<'_> {
    /// `D(i, k + 1)` at step-`k` state `s`.
    fn discount(&self, i: usize, k: usize, s: usize) -> f64 {
        let (from, to) = match self.model.layout() {
            Layout::Path => (
                self.cumulative.get(i, self.model.ancestor(i, s)),
                self.cumulative.get(k, s) * self.scenario.step_discount(k, s),
            ),
            Layout::Node => (
                self.cumulative.get(i, 0),
                self.cumulative.get(k, 0) * self.scenario.step_discount(k, 0),
            ),
        };
        to / from
    }
}

impl VolterraDriver for SubDriver<'_> {
    fn evaluate(&self, anchor: usize, at: StateRef, z: f64) -> f64 {
        let g = self.scenario.conjugate().get(at.step, at.state);
        let mu = self.scenario.mu().get(at.step, at.state);
        self.sign * (-self.discount(anchor, at.step, at.state) * g - mu * z)
    }
}

fn require_feasible(scenario: &Scenario) -> Result<()> {
    for (k, row) in scenario.conjugate().rows() {
        if let Some(s) = row.iter().position(|g| !g.is_finite()) {
            return Err(Error::ScenarioInfeasible { step: k, state: s });
        }
    }
    Ok(())
}

/// Terminal family `phi(t_i) = -D(i, N) X`.
fn discounted_family<'a>(
    model: &'a LatticeModel,
    scenario: &'a Scenario,
    x: &'a TerminalClaim,
) -> FamilyFn<impl Fn(usize) -> Result<TerminalClaim> + Sync + 'a> {
    FamilyFn(move |i: usize| {
        let d = discount_between(model, scenario, i, model.steps())?;
        Ok(TerminalClaim::new(
            x.values().iter().zip(&d).map(|(v, d)| -d * v).collect(),
        ))
    })
}

/// Parameters of the cash-subadditive entropic rule.
#[derive(Debug, Clone, PartialEq)]
pub struct CsermParams {
    pub beta: ParamField,
    pub gamma: f64,
    pub gamma1: f64,
}

/// Rule parameters; each rule reads only the fields it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleParams {
    pub sign: SignVariant,
    pub kappa: Kappa,
    /// Confidence drift of the generalized marginal rule.
    pub lambda: ParamField,
    pub as_nodes: usize,
    pub cserm: Option<CsermParams>,
}

impl Default for RuleParams {
    fn default() -> Self {
        Self {
            sign: SignVariant::Corrected,
            kappa: Kappa::InverseGamma1,
            lambda: ParamField::Constant(0.0),
            as_nodes: DEFAULT_AS_NODES,
            cserm: None,
        }
    }
}

impl RuleParams {
    /// Defaults with the entropic rule parameters taken from a `cserm` driver (`gamma1 = gamma`).
    pub fn for_driver(driver: &BuiltinDriver) -> Self {
        let cserm = match driver {
            BuiltinDriver::Cserm { beta, gamma } => Some(CsermParams {
                beta: beta.clone(),
                gamma: *gamma,
                gamma1: *gamma,
            }),
            _ => None,
        };
        Self {
            cserm,
            ..Self::default()
        }
    }
}

/// Whether `rule` can be evaluated for aggregates priced by `driver`.
pub fn rule_applies(rule: Rule, driver: &BuiltinDriver) -> bool {
    match rule {
        Rule::Grad => !matches!(driver, BuiltinDriver::LinearAmbiguous { .. }),
        Rule::Cserm => matches!(driver, BuiltinDriver::Cserm { .. }),
        _ => true,
    }
}

enum Prepared {
    Sub {
        scenario: Scenario,
    },
    SubBsvie {
        scenario: Scenario,
        cumulative: AdaptedField,
        sign: f64,
    },
    Linear {
        driver: BuiltinDriver,
    },
    Marginal,
    GenMarginal {
        driver: BuiltinDriver,
    },
    AumannShapley {
        scenarios: Vec<Scenario>,
        weights: Vec<f64>,
        penalized: bool,
    },
    Cserm {
        rho_se: AdaptedField,
        driver: BuiltinDriver,
    },
}

/// An allocation rule with the aggregate-dependent work done once.
///
/// [`Allocator::apply`] then evaluates `Lambda_t(X, Y)` for any sub-unit `X`.
pub struct Allocator<'a> {
    rule: Rule,
    model: &'a LatticeModel,
    driver: &'a dyn Driver,
    y: TerminalClaim,
    rho_y: AdaptedField,
    prepared: Prepared,
}

fn linearization(
    model: &LatticeModel,
    driver: &dyn Driver,
    rho: &BsdeSolution,
) -> Result<BuiltinDriver> {
    let n = model.steps();
    let mut beta = Vec::with_capacity(n);
    let mut lambda = Vec::with_capacity(n);
    for k in 0..n {
        let (ys, zs) = (rho.value_at(k), rho.z().at(k));
        let mut b = Vec::with_capacity(ys.len());
        let mut l = Vec::with_capacity(ys.len());
        for s in 0..ys.len() {
            let (gy, gz) = driver
                .gradient(StateRef::new(k, s), ys[s], zs[s])
                .ok_or_else(|| {
                    Error::Capability(format!(
                        "driver {} is not differentiable; use the subdifferential allocation",
                        driver.name()
                    ))
                })?;
            b.push(-gy);
            l.push(gz);
        }
        beta.push(b);
        lambda.push(l);
    }
    Ok(BuiltinDriver::linear_generic(
        ParamField::Field(beta),
        ParamField::Field(lambda),
    ))
}

impl<'a> Allocator<'a> {
    pub fn prepare(
        rule: Rule,
        model: &'a LatticeModel,
        driver: &'a dyn Driver,
        y: &TerminalClaim,
        params: &RuleParams,
    ) -> Result<Self> {
        y.check_shape(model)?;
        let rho = risk_measure(model, driver, y)?;
        let mut rho_y = rho.y().clone();
        let prepared = match rule {
            Rule::Sub => {
                model.require_path("the direct subdifferential allocation")?;
                Prepared::Sub {
                    scenario: extract_scenario(model, driver, &rho)?,
                }
            }
            Rule::SubBsvie => {
                let scenario = extract_scenario(model, driver, &rho)?;
                require_feasible(&scenario)?;
                let cumulative = cumulative_discount(model, &scenario)?;
                Prepared::SubBsvie {
                    scenario,
                    cumulative,
                    sign: match params.sign {
                        SignVariant::Corrected => 1.0,
                        SignVariant::Paper => -1.0,
                    },
                }
            }
            Rule::Grad => Prepared::Linear {
                driver: linearization(model, driver, &rho)?,
            },
            Rule::Marginal => Prepared::Marginal,
            Rule::GenMarginal => {
                let scenario = extract_scenario(model, driver, &rho)?;
                Prepared::GenMarginal {
                    driver: BuiltinDriver::linear_generic(
                        ParamField::from_adapted(scenario.beta())?,
                        params.lambda.clone(),
                    ),
                }
            }
            Rule::AumannShapley | Rule::PenalizedAumannShapley => {
                let (nodes, weights) = gauss_legendre_unit(params.as_nodes)?;
                let scenarios = nodes
                    .par_iter()
                    .map(|&a| {
                        aggregate(model, driver, &y.scaled(a))
                            .map(|agg| agg.scenario)
                            .map_err(|e| Error::QuadratureNode {
                                node: a,
                                source: Box::new(e),
                            })
                    })
                    .collect::<Result<_>>()?;
                Prepared::AumannShapley {
                    scenarios,
                    weights,
                    penalized: rule == Rule::PenalizedAumannShapley,
                }
            }
            Rule::Cserm => {
                let p = params.cserm.as_ref().ok_or_else(|| {
                    Error::Config("the entropic rule needs beta, gamma and gamma1".into())
                })?;
                let k = params.kappa.resolve(p.gamma1)?;
                let se = BuiltinDriver::cserm(p.beta.clone(), p.gamma)?;
                let aux = BuiltinDriver::cserm(p.beta.clone(), p.gamma1)?;
                let rho_se = risk_measure(model, &se, y)?.y().clone();
                let rho_aux = risk_measure(model, &aux, y)?;
                let slope = ParamField::from_adapted(&rho_aux.z().map(|z| k * z))?;
                rho_y = rho_se.clone();
                Prepared::Cserm {
                    rho_se,
                    driver: BuiltinDriver::linear_generic(p.beta.clone(), slope),
                }
            }
        };
        Ok(Self {
            rule,
            model,
            driver,
            y: y.clone(),
            rho_y,
            prepared,
        })
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    /// `rho_t(Y)` under the measure the rule allocates (`rho^SE` for the entropic rule).
    pub fn aggregate_risk(&self) -> &AdaptedField {
        &self.rho_y
    }

    /// Optimal scenario of the aggregate, for rules that use one.
    pub fn scenario(&self) -> Option<&Scenario> {
        match &self.prepared {
            Prepared::Sub { scenario } | Prepared::SubBsvie { scenario, .. } => Some(scenario),
            _ => None,
        }
    }

    /// `Lambda_t(X, Y)` on steps `0..=N`.
    pub fn apply(&self, x: &TerminalClaim) -> Result<AdaptedField> {
        Ok(self.apply_full(x)?.0)
    }

    fn apply_full(&self, x: &TerminalClaim) -> Result<(AdaptedField, Option<BsvieSolution>)> {
        x.check_shape(self.model)?;
        let model = self.model;
        Ok(match &self.prepared {
            Prepared::Sub { scenario } => (scenario_values(model, scenario, x, true)?, None),
            Prepared::SubBsvie {
                scenario,
                cumulative,
                sign,
            } => {
                let vdriver = SubDriver {
                    model,
                    scenario,
                    cumulative,
                    sign: *sign,
                };
                let sol = solve_bsvie(model, &vdriver, &discounted_family(model, scenario, x))?;
                (sol.diagonal().clone(), Some(sol))
            }
            Prepared::Linear { driver } => (risk_measure(model, driver, x)?.y().clone(), None),
            Prepared::Marginal => {
                let rest = risk_measure(model, self.driver, &(&self.y - x))?;
                (difference(&self.rho_y, rest.y()), None)
            }
            Prepared::GenMarginal { driver } => {
                let rest = risk_measure(model, driver, &(&self.y - x))?;
                (difference(&self.rho_y, rest.y()), None)
            }
            Prepared::AumannShapley {
                scenarios,
                weights,
                penalized,
            } => {
                let parts: Vec<AdaptedField> = scenarios
                    .par_iter()
                    .map(|sc| scenario_values(model, sc, x, *penalized))
                    .collect::<Result<_>>()?;
                let mut total = parts[0].map(|v| weights[0] * v);
                for (f, w) in parts.iter().zip(weights).skip(1) {
                    total = total.zip_with(f, |acc, v| acc + w * v);
                }
                (total, None)
            }
            Prepared::Cserm { rho_se, driver } => {
                let rest = risk_measure(model, driver, &(&self.y - x))?;
                (difference(rho_se, rest.y()), None)
            }
        })
    }
}

/// Subdifferential rule as the pathwise sum `E^mu[D(t, N)(-X) - S_t | F_t]` (path layout).
pub fn alloc_sub_direct(
    model: &LatticeModel,
    driver: &dyn Driver,
    x: &TerminalClaim,
    y: &TerminalClaim,
) -> Result<AllocationResult> {
    let alloc = Allocator::prepare(Rule::Sub, model, driver, y, &RuleParams::default())?;
    let mut out = AllocationResult::new(Rule::Sub, alloc.apply(x)?);
    let agg_rho = risk_measure(model, driver, y)?;
    let scenario = alloc
        .scenario()
        .expect("subdifferential rule keeps its scenario");
    out.diagnostics.dual_gap = Some(dual_check(model, scenario, &agg_rho, y, 0)?.max_gap);
    Ok(out)
}

/// Subdifferential rule as the diagonal of the Volterra equation.
///
/// On the path layout the diagnostics carry the largest gap to [`alloc_sub_direct`].
pub fn alloc_sub_bsvie(
    model: &LatticeModel,
    driver: &dyn Driver,
    x: &TerminalClaim,
    y: &TerminalClaim,
    sign: SignVariant,
) -> Result<AllocationResult> {
    let params = RuleParams {
        sign,
        ..RuleParams::default()
    };
    let alloc = Allocator::prepare(Rule::SubBsvie, model, driver, y, &params)?;
    let (values, sol) = alloc.apply_full(x)?;
    let mut out = AllocationResult::new(Rule::SubBsvie, values);
    out.volterra = sol;
    if model.layout() == Layout::Path {
        let scenario = alloc.scenario().expect("Volterra rule keeps its scenario");
        let direct = scenario_values(model, scenario, x, true)?;
        out.diagnostics.cross_method_gap = Some(out.values.max_abs_diff(&direct));
    }
    Ok(out)
}

/// General Volterra allocation with terminal family `-D(i, N) X` and a free driver.
pub fn alloc_general_bsvie(
    model: &LatticeModel,
    scenario: &Scenario,
    x: &TerminalClaim,
    vdriver: &dyn VolterraDriver,
) -> Result<AllocationResult> {
    x.check_shape(model)?;
    let sol = solve_bsvie(model, vdriver, &discounted_family(model, scenario, x))?;
    let mut out = AllocationResult::new(Rule::SubBsvie, sol.diagonal().clone());
    out.volterra = Some(sol);
    Ok(out)
}

/// Central difference `[rho_t(Y + hX) - rho_t(Y - hX)] / (2h)` on all steps.
pub fn gradient_fd_oracle(
    model: &LatticeModel,
    driver: &dyn Driver,
    x: &TerminalClaim,
    y: &TerminalClaim,
    h: f64,
) -> Result<AdaptedField> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let up = risk_measure(model, driver, &y.zip_with(x, |a, b| a + h * b))?;
    let down = risk_measure(model, driver, &y.zip_with(x, |a, b| a - h * b))?;
    Ok(up.y().zip_with(down.y(), |a, b| (a - b) / (2.0 * h)))
}

/// Gradient rule: the linear BSDE with `beta = -g_y`, `mu = -g_z` along `rho(Y)` and terminal `-X`.
pub fn alloc_gradient(
    model: &LatticeModel,
    driver: &dyn Driver,
    x: &TerminalClaim,
    y: &TerminalClaim,
) -> Result<AllocationResult> {
    let alloc = Allocator::prepare(Rule::Grad, model, driver, y, &RuleParams::default())?;
    let mut out = AllocationResult::new(Rule::Grad, alloc.apply(x)?);
    let fd = gradient_fd_oracle(model, driver, x, y, DEFAULT_FD_STEP)?;
    out.diagnostics.fd_residual = Some(out.values.max_abs_diff(&fd));
    Ok(out)
}

/// Marginal rule `rho_t(Y) - rho_t(Y - X)`.
pub fn alloc_marginal(
    model: &LatticeModel,
    driver: &dyn Driver,
    x: &TerminalClaim,
    y: &TerminalClaim,
) -> Result<AllocationResult> {
    let alloc = Allocator::prepare(Rule::Marginal, model, driver, y, &RuleParams::default())?;
    Ok(AllocationResult::new(Rule::Marginal, alloc.apply(x)?))
}

/// Generalized marginal rule `rho_t(Y) - rho^lambda_t(Y - X)`, where `rho^lambda` has
/// driver `-beta^Y y + lambda z`.
pub fn alloc_generalized_marginal(
    model: &LatticeModel,
    driver: &dyn Driver,
    x: &TerminalClaim,
    y: &TerminalClaim,
    lambda: &ParamField,
) -> Result<AllocationResult> {
    let params = RuleParams {
        lambda: lambda.clone(),
        ..RuleParams::default()
    };
    let alloc = Allocator::prepare(Rule::GenMarginal, model, driver, y, &params)?;
    Ok(AllocationResult::new(Rule::GenMarginal, alloc.apply(x)?))
}

/// Settings of the Aumann–Shapley rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AumannShapley {
    pub nodes: usize,
    pub penalized: bool,
    /// Estimate the quadrature residual by re-running with twice the nodes.
    pub residual: bool,
}

impl Default for AumannShapley {
    fn default() -> Self {
        Self {
            nodes: DEFAULT_AS_NODES,
            penalized: false,
            residual: true,
        }
    }
}

/// Aumann–Shapley rule: Gauss–Legendre average over `a` in `[0, 1]` of the scenario
/// value of `X` at the aggregate `a Y`, optionally net of the penalty at `a Y`.
pub fn alloc_aumann_shapley(
    model: &LatticeModel,
    driver: &dyn Driver,
    x: &TerminalClaim,
    y: &TerminalClaim,
    settings: &AumannShapley,
) -> Result<AllocationResult> {
    let rule = if settings.penalized {
        Rule::PenalizedAumannShapley
    } else {
        Rule::AumannShapley
    };
    let run = |nodes: usize| -> Result<AdaptedField> {
        let params = RuleParams {
            as_nodes: nodes,
            ..RuleParams::default()
        };
        Allocator::prepare(rule, model, driver, y, &params)?.apply(x)
    };
    let mut out = AllocationResult::new(rule, run(settings.nodes)?);
    out.diagnostics.quadrature_nodes = Some(settings.nodes);
    if settings.residual {
        let fine = run(2 * settings.nodes)?;
        out.diagnostics.quadrature_residual = Some(out.values.max_abs_diff(&fine));
    }
    Ok(out)
}

/// Cash-subadditive entropic rule `rho^SE_t(Y) - rho^grad_t(Y - X)`, where `rho^grad` has
/// driver `-beta y + kappa Z^{gamma1} z` and `Z^{gamma1}` comes from `rho^{gamma1}(Y)`.
#[allow(clippy::too_many_arguments)]
pub fn alloc_cserm(
    model: &LatticeModel,
    x: &TerminalClaim,
    y: &TerminalClaim,
    beta: &ParamField,
    gamma: f64,
    gamma1: f64,
    kappa: Kappa,
) -> Result<AllocationResult> {
    let params = RuleParams {
        kappa,
        cserm: Some(CsermParams {
            beta: beta.clone(),
            gamma,
            gamma1,
        }),
        ..RuleParams::default()
    };
    let aux = BuiltinDriver::cserm(beta.clone(), gamma1)?;
    let alloc = Allocator::prepare(Rule::Cserm, model, &aux, y, &params)?;
    let mut out = AllocationResult::new(Rule::Cserm, alloc.apply(x)?);
    let rest = y - x;
    let grad = difference(alloc.aggregate_risk(), &out.values);
    let fd = gradient_fd_oracle(model, &aux, &rest, y, DEFAULT_FD_STEP)?;
    out.diagnostics.fd_residual = Some(grad.max_abs_diff(&fd));
    out.diagnostics.kappa = Some(kappa.resolve(gamma1)?);
    Ok(out)
}

/// `max |Lambda_s(-Lambda_t(X, Y), Y) - Lambda_s(X, Y)|` over step-`s` states for a
/// subdifferential rule (path layout).
pub fn time_consistency_gap(
    allocator: &Allocator<'_>,
    x: &TerminalClaim,
    s: usize,
    t: usize,
) -> Result<f64> {
    let model = allocator.model;
    if s > t || t > model.steps() {
        return Err(Error::Index(format!(
            "time-consistency check from step {s} to step {t}"
        )));
    }
    let base = allocator.apply(x)?;
    let lifted = model.lift_to_terminal(t, base.at(t))?;
    let again = allocator.apply(&-&lifted)?;
    Ok(base
        .at(s)
        .iter()
        .zip(again.at(s))
        .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n2() -> (LatticeModel, BuiltinDriver, TerminalClaim) {
        let m = LatticeModel::with(1.0, 2, Layout::Path).unwrap();
        let d = BuiltinDriver::entropic(1.0).unwrap();
        let y = m.claim_of_terminal(|b| -b);
        (m, d, y)
    }

    #[test]
    fn hand_values_on_two_steps() {
        let (m, d, y) = n2();
        let half = y.scaled(0.5);
        let sub = alloc_sub_direct(&m, &d, &half, &y).unwrap();
        assert!(sub.root().abs() < 1e-12);
        let bsvie = alloc_sub_bsvie(&m, &d, &half, &y, SignVariant::Corrected).unwrap();
        assert!(bsvie.root().abs() < 1e-12);
        assert!((alloc_marginal(&m, &d, &half, &y).unwrap().root() - 0.375).abs() < 1e-12);
        let grad = alloc_gradient(&m, &d, &half, &y).unwrap();
        assert!((grad.root() - 0.5).abs() < 1e-10);
        let aus = alloc_aumann_shapley(&m, &d, &y, &y, &AumannShapley::default()).unwrap();
        assert!((aus.root() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn terminal_values_are_minus_x() {
        let (m, d, y) = n2();
        let x = m.claim_of_path(|p| p.running_max()).unwrap();
        let neg: Vec<f64> = x.values().iter().map(|v| -v).collect();
        for r in [
            alloc_sub_direct(&m, &d, &x, &y).unwrap(),
            alloc_sub_bsvie(&m, &d, &x, &y, SignVariant::Corrected).unwrap(),
            alloc_gradient(&m, &d, &x, &y).unwrap(),
        ] {
            assert_eq!(r.at(2), neg.as_slice(), "{:?}", r.rule);
        }
    }

    #[test]
    fn cserm_linearization_on_two_steps() {
        let m = LatticeModel::with(1.0, 2, Layout::Path).unwrap();
        let y = m.claim_of_terminal(|b| -b);
        let x = y.scaled(0.5);
        let beta = ParamField::Constant(0.0);
        let exact = alloc_cserm(&m, &x, &y, &beta, 1.0, 1.0, Kappa::InverseGamma1).unwrap();
        // rho^SE(Y) = 0.5 and the directional derivative along (Y - X) is 0.5.
        assert!(exact.root().abs() < 1e-12);
        assert!(exact.diagnostics.fd_residual.unwrap() < 1e-6);
        let doubled = alloc_cserm(&m, &x, &y, &beta, 1.0, 1.0, Kappa::TwiceInverseGamma1).unwrap();
        assert!((doubled.root() + 0.5).abs() < 1e-12);
        assert!(doubled.diagnostics.fd_residual.unwrap() > 1e-3);
        assert!(alloc_cserm(&m, &x, &y, &beta, 1.0, 1.0, Kappa::Value(-1.0)).is_err());
    }

    #[test]
    fn gradient_needs_differentiable_driver() {
        let m = LatticeModel::with(1.0, 2, Layout::Node).unwrap();
        let d = BuiltinDriver::linear_ambiguous(0.0, 0.1);
        let y = TerminalClaim::constant(&m, -1.0);
        assert!(matches!(
            alloc_gradient(&m, &d, &y, &y),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn direct_rule_needs_paths() {
        let m = LatticeModel::with(1.0, 2, Layout::Node).unwrap();
        let d = BuiltinDriver::Zero;
        let y = TerminalClaim::constant(&m, -1.0);
        assert!(matches!(
            alloc_sub_direct(&m, &d, &y, &y),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn bsvie_on_nodes_with_deterministic_rate() {
        let node = LatticeModel::with(1.0, 6, Layout::Node).unwrap();
        let path = LatticeModel::with(1.0, 6, Layout::Path).unwrap();
        let d = BuiltinDriver::cserm(ParamField::PerStep(vec![0.1, 0.2, 0.0, 0.3, 0.1, 0.2]), 1.2)
            .unwrap();
        let f = |b: f64| 0.4 * b.tanh();
        let g = |b: f64| 0.2 * b - 0.1;
        let a = alloc_sub_bsvie(
            &node,
            &d,
            &node.claim_of_terminal(g),
            &node.claim_of_terminal(f),
            SignVariant::Corrected,
        )
        .unwrap();
        let b = alloc_sub_direct(
            &path,
            &d,
            &path.claim_of_terminal(g),
            &path.claim_of_terminal(f),
        )
        .unwrap();
        assert!((a.root() - b.root()).abs() < 1e-12);
    }

    #[test]
    fn rule_tags_round_trip() {
        for r in Rule::ALL {
            assert_eq!(Rule::from_tag(r.tag()), Some(r));
        }
    }
}
