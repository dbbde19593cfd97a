//! Seeded random instances and axiom suites for risk measures and allocation rules.
//!
//! Every check records a violation amount per instance; positive values mean the
//! property fails by that much. A row passes when its worst violation is within
//! the row tolerance. Rows marked unasserted are measurements only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{rule_applies, Allocator, Kappa, Rule, RuleParams, SignVariant};
use crate::bsde::{flow_consistency_check, risk_measure, solve_bsde};
use crate::bsvie::{solve_bsvie, FamilyFn, FnVolterra};
use crate::drivers::{
    BuiltinDriver, Conjugate, Driver, DriverFlags, Lipschitz, ParamField, ScenarioPoint, StateRef,
};
use crate::error::{Error, Result};
use crate::lattice::{
    average_over_subtrees, pathwise_density, AdaptedField, LatticeModel, Layout, TerminalClaim,
};
use crate::scenario::{
    discounted_expectation_field, dual_check, extract_scenario, penalty_at, subdifferential_test,
};

/// Largest step count of generated instances.
pub const MAX_INSTANCE_STEPS: usize = 12;

/// Tolerance of axioms that hold exactly on the lattice.
pub const AXIOM_TOL: f64 = 1e-9;
/// Tolerance of the flow property.
pub const FLOW_TOL: f64 = 1e-10;
/// Tolerance of comparison theorems.
pub const COMPARISON_TOL: f64 = 1e-12;
/// Tolerance between the pathwise and Volterra subdifferential rules.
pub const CROSS_METHOD_TOL: f64 = 1e-8;
/// Tolerance of the dual representation suite.
pub const DUALITY_TOL: f64 = 1e-8;

/// Builtin driver families sampled by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    Zero,
    LinearAmbiguous,
    Entropic,
    Cserm,
    LinearGeneric,
}

impl DriverKind {
    pub const ALL: [DriverKind; 5] = [
        DriverKind::Zero,
        DriverKind::LinearAmbiguous,
        DriverKind::Entropic,
        DriverKind::Cserm,
        DriverKind::LinearGeneric,
    ];

    /// A fixed driver of this family.
    pub fn example(self) -> BuiltinDriver {
        match self {
            DriverKind::Zero => BuiltinDriver::Zero,
            DriverKind::LinearAmbiguous => BuiltinDriver::linear_ambiguous(0.05, 0.1),
            DriverKind::Entropic => BuiltinDriver::Entropic { gamma: 1.0 },
            DriverKind::Cserm => BuiltinDriver::Cserm {
                beta: ParamField::Constant(0.1),
                gamma: 1.0,
            },
            DriverKind::LinearGeneric => BuiltinDriver::linear_generic(0.1, 0.2),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            DriverKind::Zero => "zero",
            DriverKind::LinearAmbiguous => "linear_ambiguous",
            DriverKind::Entropic => "entropic",
            DriverKind::Cserm => "cserm",
            DriverKind::LinearGeneric => "linear_generic",
        }
    }
}

/// Recipe for one random instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSpec {
    pub seed: u64,
    /// Fixed step count; sampled from `2..=8` when absent.
    pub steps: Option<usize>,
    pub driver: DriverKind,
    pub horizon: f64,
    /// Number of sub-units the aggregate is split into, `1..=4`.
    pub partition: usize,
}

impl InstanceSpec {
    pub fn new(seed: u64, driver: DriverKind) -> Self {
        Self {
            seed,
            steps: None,
            driver,
            horizon: 1.0,
            partition: 3,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = Some(steps);
        self
    }
}

/// A sampled lattice, driver and family of bounded claims.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub spec: InstanceSpec,
    pub model: LatticeModel,
    pub driver: BuiltinDriver,
    /// Bound on every sampled claim.
    pub claim_bound: f64,
    /// Aggregate `Y`, the sum of `parts`.
    pub y: TerminalClaim,
    /// Sub-units with `sum parts = Y`.
    pub parts: Vec<TerminalClaim>,
    /// Independent claim for pairwise axioms.
    pub x: TerminalClaim,
    /// Nonnegative claim subtracted from `x` for monotonicity checks.
    pub bump: TerminalClaim,
    /// Step at which `cash` and `event` are observable.
    pub t: usize,
    /// Nonnegative `F_t`-measurable cash amount, lifted to maturity.
    pub cash: TerminalClaim,
    /// `F_t`-measurable event, one flag per step-`t` state.
    pub event: Vec<bool>,
    /// Convex weights with one entry per part.
    pub weights: Vec<f64>,
    /// Mixing weight in `[0, 1]`.
    pub alpha: f64,
    /// Scaling factor in `[0, 3]`.
    pub scale: f64,
    /// Confidence drift for the generalized marginal rule.
    pub lambda: ParamField,
}

fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn random_field(model: &LatticeModel, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ParamField {
    match rng.random_range(0..3) {
        0 => ParamField::Constant(rng.random_range(lo..=hi)),
        1 => ParamField::PerStep(
            (0..model.steps())
                .map(|_| rng.random_range(lo..=hi))
                .collect(),
        ),
        _ => ParamField::Field(
            (0..model.steps())
                .map(|k| {
                    (0..model.state_count(k))
                        .map(|_| rng.random_range(lo..=hi))
                        .collect()
                })
                .collect(),
        ),
    }
}

/// Bounded path functional `bound * (w1 tanh(B_T) + w2 sin(3 mean B) + w3 u) / sum |w|`.
fn random_claim(model: &LatticeModel, rng: &mut ChaCha8Rng, bound: f64) -> Result<TerminalClaim> {
    let w: [f64; 3] = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let norm = w.iter().map(|v| v.abs()).sum::<f64>().max(1e-3);
    let noise: Vec<f64> = (0..model.terminal_count())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    model.claim_of_path(|p| {
        let v = w[0] * p.terminal().tanh()
            + w[1] * (3.0 * p.running_mean()).sin()
            + w[2] * noise[p.index()];
        bound * v / norm
    })
}

/// `count` bounded path-functional claims drawn from `seed` (path layout).
pub fn sample_claims(
    model: &LatticeModel,
    seed: u64,
    count: usize,
    bound: f64,
) -> Result<Vec<TerminalClaim>> {
    let mut rng = instance_rng(seed, 4);
    (0..count)
        .map(|_| random_claim(model, &mut rng, bound))
        .collect()
}

fn random_nonnegative(model: &LatticeModel, rng: &mut ChaCha8Rng, bound: f64) -> TerminalClaim {
    TerminalClaim::new(
        (0..model.terminal_count())
            .map(|_| {
                if rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(0.0..bound)
                }
            })
            .collect(),
    )
}

/// Convex weights from normalized exponential draws.
fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.random_range(0.0..1.0f64)).ln() + 1e-3)
        .collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

fn random_driver(
    kind: DriverKind,
    model: &LatticeModel,
    rng: &mut ChaCha8Rng,
) -> Result<BuiltinDriver> {
    Ok(match kind {
        DriverKind::Zero => BuiltinDriver::Zero,
        DriverKind::LinearAmbiguous => {
            let r = random_field(model, rng, 0.0, 0.1);
            let extra = random_field(model, rng, 0.0, 0.3);
            let big_r = match (&r, &extra) {
                (ParamField::Constant(a), ParamField::Constant(b)) => ParamField::Constant(a + b),
                _ => ParamField::Field(
                    (0..model.steps())
                        .map(|k| {
                            (0..model.state_count(k))
                                .map(|s| {
                                    let at = StateRef::new(k, s);
                                    r.value(at) + extra.value(at)
                                })
                                .collect()
                        })
                        .collect(),
                ),
            };
            BuiltinDriver::LinearAmbiguous { r, big_r }
        }
        DriverKind::Entropic => BuiltinDriver::entropic(rng.random_range(0.5..2.0))?,
        DriverKind::Cserm => {
            let beta = random_field(model, rng, 0.0, 0.3);
            BuiltinDriver::cserm(beta, rng.random_range(0.5..2.0))?
        }
        DriverKind::LinearGeneric => BuiltinDriver::linear_generic(
            random_field(model, rng, 0.0, 0.3),
            random_field(model, rng, -0.8, 0.8),
        ),
    })
}

/// Claim bound keeping every quadratic-driver tilt inside the admissible range.
pub fn claim_bound(driver: &BuiltinDriver) -> f64 {
    match driver {
        BuiltinDriver::Entropic { gamma } | BuiltinDriver::Cserm { gamma, .. } => 0.4 * gamma,
        _ => 1.0,
    }
}

/// Deterministic instance from `spec` (path layout).
pub fn random_instance(spec: &InstanceSpec) -> Result<Instance> {
    if let Some(n) = spec.steps {
        if n == 0 || n > MAX_INSTANCE_STEPS {
            return Err(Error::Config(format!(
                "instances use the path layout with 1..={MAX_INSTANCE_STEPS} steps, got {n}"
            )));
        }
    }
    if spec.partition == 0 || spec.partition > 4 {
        return Err(Error::Config(format!(
            "partition size must be in 1..=4, got {}",
            spec.partition
        )));
    }
    let mut rng = instance_rng(spec.seed, 0);
    let steps = spec.steps.unwrap_or_else(|| rng.random_range(2..=8));
    let model = LatticeModel::with(spec.horizon, steps, Layout::Path)?;
    let driver = random_driver(spec.driver, &model, &mut rng)?;
    let bound = claim_bound(&driver);
    let n = spec.partition;
    let parts = (0..n)
        .map(|_| random_claim(&model, &mut rng, bound / n as f64))
        .collect::<Result<Vec<_>>>()?;
    let mut y = parts[0].clone();
    for p in &parts[1..] {
        y = &y + p;
    }
    let x = random_claim(&model, &mut rng, bound)?;
    let bump = random_nonnegative(&model, &mut rng, bound);
    let t = rng.random_range(0..=steps);
    let cash_t: Vec<f64> = (0..model.state_count(t))
        .map(|_| rng.random_range(0.0..bound))
        .collect();
    let cash = model.lift_to_terminal(t, &cash_t)?;
    let event = (0..model.state_count(t))
        .map(|_| rng.random_bool(0.5))
        .collect();
    let weights = simplex(&mut rng, n);
    let alpha = rng.random_range(0.0..=1.0);
    let scale = rng.random_range(0.0..=3.0);
    let lambda = random_field(&model, &mut rng, -1.0, 1.0);
    Ok(Instance {
        spec: spec.clone(),
        model,
        driver,
        claim_bound: bound,
        y,
        parts,
        x,
        bump,
        t,
        cash,
        event,
        weights,
        alpha,
        scale,
        lambda,
    })
}

/// Worst violation of one property across instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub worst: f64,
    pub tolerance: f64,
    pub asserted: bool,
    pub passed: bool,
    pub samples: usize,
}

/// Rows of one suite run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub subject: String,
    pub seed: u64,
    pub count: usize,
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    /// True when every asserted row passes.
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| !r.asserted || r.passed)
    }

    pub fn failures(&self) -> Vec<&CheckRow> {
        self.rows
            .iter()
            .filter(|r| r.asserted && !r.passed)
            .collect()
    }

    pub fn row(&self, check: &str) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.check == check)
    }
}

/// One measurement of one instance.
#[derive(Debug, Clone, PartialEq)]
struct Measure {
    check: &'static str,
    violation: f64,
    tolerance: f64,
    asserted: bool,
}

fn measure(check: &'static str, violation: f64, tolerance: f64, asserted: bool) -> Measure {
    Measure {
        check,
        violation,
        tolerance,
        asserted,
    }
}

/// Folds per-instance measurements in instance order into report rows.
fn fold(
    suite: &str,
    subject: String,
    seed: u64,
    count: usize,
    all: Vec<Vec<Measure>>,
) -> SuiteReport {
    let mut rows: Vec<CheckRow> = Vec::new();
    for m in all.into_iter().flatten() {
        match rows.iter_mut().find(|r| r.check == m.check) {
            Some(r) => {
                r.worst = r.worst.max(m.violation);
                r.samples += 1;
                r.asserted |= m.asserted;
                r.tolerance = r.tolerance.min(m.tolerance);
            }
            None => rows.push(CheckRow {
                check: m.check.to_string(),
                worst: m.violation,
                tolerance: m.tolerance,
                asserted: m.asserted,
                passed: false,
                samples: 1,
            }),
        }
    }
    for r in &mut rows {
        r.passed = r.worst <= r.tolerance;
    }
    SuiteReport {
        suite: suite.to_string(),
        subject,
        seed,
        count,
        rows,
    }
}

fn run_instances<F>(count: usize, seed: u64, f: F) -> Result<Vec<Vec<Measure>>>
where
    F: Fn(u64) -> Result<Vec<Measure>> + Sync,
{
    (0..count as u64)
        .into_par_iter()
        .map(|i| f(seed.wrapping_add(i.wrapping_mul(0x2545_F491_4F6C_DD1D))))
        .collect()
}

fn instance_for(kind: DriverKind, seed: u64) -> Result<Instance> {
    random_instance(&InstanceSpec::new(seed, kind))
}

/// Largest value of `f(a, b)` over pointwise pairs of two fields on steps `from..=to`.
fn worst_over(
    a: &AdaptedField,
    b: &AdaptedField,
    from: usize,
    to: usize,
    f: impl Fn(f64, f64) -> f64,
) -> f64 {
    let mut w = f64::NEG_INFINITY;
    for k in from..=to {
        for (u, v) in a.at(k).iter().zip(b.at(k)) {
            w = w.max(f(*u, *v));
        }
    }
    w
}

/// `m` restricted to step `k >= t`, read off its terminal lift.
fn cash_at(model: &LatticeModel, cash: &TerminalClaim, k: usize) -> Vec<f64> {
    (0..model.state_count(k))
        .map(|s| cash.values()[s])
        .collect()
}

fn is_cash_additive(driver: &BuiltinDriver) -> bool {
    matches!(driver, BuiltinDriver::Zero | BuiltinDriver::Entropic { .. })
}

/// Cash-subadditivity, monotonicity, convexity, regularity, flow and normalization of `rho`.
pub fn check_risk_axioms(kind: DriverKind, count: usize, seed: u64) -> Result<SuiteReport> {
    let per = run_instances(count, seed, |s| {
        let inst = instance_for(kind, s)?;
        let (m, d) = (&inst.model, &inst.driver);
        let n = m.steps();
        let rx = risk_measure(m, d, &inst.x)?;
        let ry = risk_measure(m, d, &inst.y)?;
        let mut out = Vec::new();

        let shifted = risk_measure(m, d, &(&inst.x + &inst.cash))?;
        let (mut csa, mut add, mut strict) = (f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
        for k in inst.t..=n {
            let cash = cash_at(m, &inst.cash, k);
            for (s, c) in cash.iter().enumerate() {
                let slack = shifted.y().get(k, s) - (rx.y().get(k, s) - c);
                csa = csa.max(-slack);
                add = add.max(slack.abs());
                strict = strict.max(slack);
            }
        }
        out.push(measure("cash_subadditivity", csa, AXIOM_TOL, true));
        out.push(measure(
            "cash_additivity",
            add,
            AXIOM_TOL,
            is_cash_additive(d),
        ));
        out.push(measure(
            "strict_cash_subadditivity_witness",
            strict,
            f64::INFINITY,
            false,
        ));

        let lower = risk_measure(m, d, &(&inst.x - &inst.bump))?;
        out.push(measure(
            "monotonicity",
            worst_over(rx.y(), lower.y(), 0, n, |a, b| a - b),
            AXIOM_TOL,
            true,
        ));

        let a = inst.alpha;
        let mix = risk_measure(
            m,
            d,
            &inst.x.zip_with(&inst.y, |u, v| a * u + (1.0 - a) * v),
        )?;
        let mut conv = f64::NEG_INFINITY;
        for k in 0..=n {
            for s in 0..m.state_count(k) {
                let rhs = a * rx.y().get(k, s) + (1.0 - a) * ry.y().get(k, s);
                conv = conv.max(mix.y().get(k, s) - rhs);
            }
        }
        out.push(measure("convexity", conv, AXIOM_TOL, true));

        let t = inst.t;
        let pasted = TerminalClaim::new(
            (0..m.terminal_count())
                .map(|p| {
                    if inst.event[m.ancestor(t, p)] {
                        inst.x.values()[p]
                    } else {
                        inst.y.values()[p]
                    }
                })
                .collect(),
        );
        let rp = risk_measure(m, d, &pasted)?;
        let reg = (0..m.state_count(t))
            .map(|s| {
                let expect = if inst.event[s] {
                    rx.y().get(t, s)
                } else {
                    ry.y().get(t, s)
                };
                (rp.y().get(t, s) - expect).abs()
            })
            .fold(0.0, f64::max);
        out.push(measure("regularity", reg, AXIOM_TOL, true));

        let flow =
            flow_consistency_check(m, d, &rx, 0, t)?.max(flow_consistency_check(m, d, &rx, t, n)?);
        out.push(measure("flow", flow, FLOW_TOL, true));

        let zero = risk_measure(m, d, &TerminalClaim::zero(m))?;
        let norm = zero
            .y()
            .rows()
            .flat_map(|(_, r)| r.iter())
            .fold(0.0f64, |w, v| w.max(v.abs()));
        out.push(measure("normalization", norm, AXIOM_TOL, true));

        let scaled = risk_measure(m, d, &inst.x.scaled(inst.scale))?;
        let ph = worst_over(scaled.y(), rx.y(), 0, n, |u, v| (u - inst.scale * v).abs());
        out.push(measure(
            "positive_homogeneity",
            ph,
            1e-12 * (1.0 + inst.scale),
            d.flags().positively_homogeneous,
        ));
        Ok(out)
    })?;
    Ok(fold("risk", kind.tag().to_string(), seed, count, per))
}

/// Which CAR axioms each rule is expected to satisfy.
struct Expected {
    car_identity: bool,
    audacity: bool,
    no_undercut: bool,
    monotonicity: bool,
    normalization: bool,
    one_csa: bool,
    sub_allocation: bool,
    full_allocation: bool,
    weak_convexity: bool,
}

fn expected(rule: Rule, driver: &BuiltinDriver) -> Expected {
    let flags = driver.flags();
    let none = Expected {
        car_identity: false,
        audacity: false,
        no_undercut: false,
        monotonicity: false,
        normalization: false,
        one_csa: false,
        sub_allocation: false,
        full_allocation: false,
        weak_convexity: false,
    };
    match rule {
        Rule::Sub | Rule::SubBsvie => Expected {
            car_identity: true,
            no_undercut: true,
            monotonicity: true,
            normalization: flags.sublinear(),
            one_csa: true,
            sub_allocation: true,
            weak_convexity: true,
            ..none
        },
        Rule::Grad => Expected {
            car_identity: flags.positively_homogeneous,
            monotonicity: true,
            normalization: true,
            one_csa: true,
            full_allocation: true,
            ..none
        },
        Rule::Marginal => Expected {
            car_identity: true,
            monotonicity: true,
            normalization: true,
            one_csa: true,
            ..none
        },
        Rule::GenMarginal => Expected {
            car_identity: true,
            monotonicity: true,
            one_csa: true,
            ..none
        },
        Rule::AumannShapley => Expected {
            car_identity: true,
            monotonicity: true,
            normalization: true,
            one_csa: true,
            full_allocation: true,
            ..none
        },
        Rule::PenalizedAumannShapley => Expected {
            audacity: true,
            no_undercut: true,
            monotonicity: true,
            one_csa: true,
            ..none
        },
        Rule::Cserm => Expected {
            car_identity: true,
            ..none
        },
    }
}

/// Rule options applied by the allocation suite.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CarSettings {
    pub sign: SignVariant,
    pub kappa: Kappa,
}

/// True when `rule` can allocate aggregates priced by `kind` drivers.
pub fn rule_applies_to(rule: Rule, kind: DriverKind) -> bool {
    rule_applies(rule, &kind.example())
}

/// CAR axioms of `rule` for aggregates priced by `kind` drivers.
///
/// The Volterra rule additionally records its gap to the pathwise rule, asserted at
/// [`CROSS_METHOD_TOL`]; this row fails under [`SignVariant::Paper`].
pub fn check_car_axioms(
    rule: Rule,
    kind: DriverKind,
    count: usize,
    seed: u64,
    settings: &CarSettings,
) -> Result<SuiteReport> {
    let per = run_instances(count, seed, |s| {
        let inst = instance_for(kind, s)?;
        let (m, d) = (&inst.model, &inst.driver);
        if !rule_applies(rule, d) {
            return Err(Error::Capability(format!(
                "rule {} does not apply to {} drivers",
                rule.tag(),
                d.tag()
            )));
        }
        let params = RuleParams {
            sign: settings.sign,
            kappa: settings.kappa,
            lambda: inst.lambda.clone(),
            ..RuleParams::for_driver(d)
        };
        let alloc = Allocator::prepare(rule, m, d, &inst.y, &params)?;
        let exp = expected(rule, d);
        let n = m.steps();
        let rho_y = alloc.aggregate_risk();
        let lam = |x: &TerminalClaim| alloc.apply(x);
        let mut out = Vec::new();

        let ly = lam(&inst.y)?;
        let identity = worst_over(&ly, rho_y, 0, n, |a, b| (a - b).abs());
        out.push(measure(
            "car_identity",
            identity,
            AXIOM_TOL,
            exp.car_identity,
        ));
        out.push(measure(
            "audacity",
            worst_over(&ly, rho_y, 0, n, |a, b| a - b),
            AXIOM_TOL,
            exp.audacity,
        ));

        let x = &inst.parts[0];
        let lx = lam(x)?;
        if rule != Rule::Cserm {
            let rho_x = risk_measure(m, d, x)?;
            out.push(measure(
                "no_undercut",
                worst_over(&lx, rho_x.y(), 0, n, |a, b| a - b),
                AXIOM_TOL,
                exp.no_undercut,
            ));
        }

        let lower = lam(&(x - &inst.bump))?;
        out.push(measure(
            "monotonicity",
            worst_over(&lx, &lower, 0, n, |a, b| a - b),
            AXIOM_TOL,
            exp.monotonicity,
        ));

        let l0 = lam(&TerminalClaim::zero(m))?;
        let norm = l0
            .rows()
            .flat_map(|(_, r)| r.iter())
            .fold(0.0f64, |w, v| w.max(v.abs()));
        out.push(measure("normalization", norm, AXIOM_TOL, exp.normalization));

        let shifted = lam(&(x + &inst.cash))?;
        let mut csa = f64::NEG_INFINITY;
        for k in inst.t..=n {
            let cash = cash_at(m, &inst.cash, k);
            for (s, c) in cash.iter().enumerate() {
                csa = csa.max(lx.get(k, s) - c - shifted.get(k, s));
            }
        }
        out.push(measure(
            "one_cash_subadditivity",
            csa,
            AXIOM_TOL,
            exp.one_csa,
        ));

        let mut total = lx.clone();
        for p in &inst.parts[1..] {
            total = total.zip_with(&lam(p)?, |a, b| a + b);
        }
        out.push(measure(
            "sub_allocation",
            worst_over(&total, &ly, 0, n, |a, b| a - b),
            AXIOM_TOL,
            exp.sub_allocation,
        ));
        out.push(measure(
            "full_allocation",
            worst_over(&total, &ly, 0, n, |a, b| (a - b).abs()),
            AXIOM_TOL,
            exp.full_allocation,
        ));

        // Sum of a_i * Lambda(X_i / a_i, Y) against Lambda(Y, Y).
        let mut weighted: Option<AdaptedField> = None;
        for (p, w) in inst.parts.iter().zip(&inst.weights) {
            let l = lam(&p.scaled(1.0 / w))?.map(|v| w * v);
            weighted = Some(match weighted {
                None => l,
                Some(acc) => acc.zip_with(&l, |a, b| a + b),
            });
        }
        let weighted = weighted.expect("at least one part");
        out.push(measure(
            "weak_convexity",
            worst_over(&ly, &weighted, 0, n, |a, b| a - b),
            AXIOM_TOL,
            exp.weak_convexity,
        ));

        if matches!(rule, Rule::Sub | Rule::SubBsvie) {
            let gap = crate::allocation::time_consistency_gap(&alloc, x, 0, inst.t)?;
            out.push(measure("time_consistency_gap", gap, f64::INFINITY, false));
        }
        if rule == Rule::SubBsvie {
            let direct = Allocator::prepare(Rule::Sub, m, d, &inst.y, &params)?.apply(x)?;
            out.push(measure(
                "cross_method",
                lx.max_abs_diff(&direct),
                CROSS_METHOD_TOL,
                true,
            ));
        }
        Ok(out)
    })?;
    Ok(fold(
        "car",
        format!("{}/{}", rule.tag(), kind.tag()),
        seed,
        count,
        per,
    ))
}

/// Gap between the Volterra and pathwise subdifferential rules on random instances.
pub fn check_cross_method(
    kind: DriverKind,
    count: usize,
    seed: u64,
    sign: SignVariant,
) -> Result<SuiteReport> {
    let per = run_instances(count, seed, |s| {
        let mut rng = instance_rng(s, 1);
        let spec = InstanceSpec::new(s, kind).with_steps(rng.random_range(2..=10));
        let inst = random_instance(&spec)?;
        let (m, d) = (&inst.model, &inst.driver);
        let params = RuleParams {
            sign,
            ..RuleParams::default()
        };
        let bsvie = Allocator::prepare(Rule::SubBsvie, m, d, &inst.y, &params)?;
        let direct = Allocator::prepare(Rule::Sub, m, d, &inst.y, &params)?;
        let gap = bsvie.apply(&inst.x)?.max_abs_diff(&direct.apply(&inst.x)?);
        Ok(vec![measure("cross_method", gap, CROSS_METHOD_TOL, true)])
    })?;
    Ok(fold(
        "cross_method",
        format!("{}/{:?}", kind.tag(), sign).to_lowercase(),
        seed,
        count,
        per,
    ))
}

/// Adapted field on steps `0..=last` with entries uniform in `[0, bound)`.
fn random_adapted(
    model: &LatticeModel,
    last: usize,
    rng: &mut ChaCha8Rng,
    bound: f64,
) -> AdaptedField {
    AdaptedField::new(
        0,
        (0..=last)
            .map(|k| {
                (0..model.state_count(k))
                    .map(|_| rng.random_range(0.0..bound))
                    .collect()
            })
            .collect(),
    )
}

/// `g + b` for a nonnegative adapted bump `b`.
struct Shifted<'a> {
    base: &'a BuiltinDriver,
    bump: &'a AdaptedField,
}

impl Driver for Shifted<'_> {
    fn name(&self) -> String {
        format!("{}+bump", self.base.tag())
    }

    fn evaluate(&self, at: StateRef, y: f64, z: f64) -> f64 {
        self.base.evaluate(at, y, z) + self.bump.get(at.step, at.state)
    }

    fn flags(&self) -> DriverFlags {
        DriverFlags {
            positively_homogeneous: false,
            subadditive: false,
            ..self.base.flags()
        }
    }

    fn lipschitz(&self) -> Lipschitz {
        self.base.lipschitz()
    }

    fn select_scenario(&self, _at: StateRef, _y: f64, _z: f64) -> Result<ScenarioPoint> {
        Err(Error::Capability(
            "shifted drivers carry no scenario".into(),
        ))
    }

    fn conjugate(&self, _at: StateRef, _b: f64, _m: f64) -> Result<Conjugate> {
        Err(Error::Capability(
            "shifted drivers carry no conjugate".into(),
        ))
    }

    fn validate(&self, model: &LatticeModel) -> Result<()> {
        self.base.validate(model)
    }
}

/// Ordered inputs give ordered outputs for BSDEs and for Volterra equations.
pub fn check_comparison(count: usize, seed: u64) -> Result<SuiteReport> {
    let mut per = run_instances(count, seed, |s| {
        let mut rng = instance_rng(s, 2);
        let kind = DriverKind::ALL[rng.random_range(0..DriverKind::ALL.len())];
        let inst = instance_for(kind, s)?;
        let (m, d) = (&inst.model, &inst.driver);
        let n = m.steps();
        let bound = inst.claim_bound;
        let bump = random_adapted(m, n - 1, &mut rng, bound);
        let g2 = Shifted {
            base: d,
            bump: &bump,
        };
        let phi1 = -&inst.x;
        let phi2 = &phi1 + &inst.bump;
        let y1 = solve_bsde(m, d, &phi1)?;
        let y2 = solve_bsde(m, &g2, &phi2)?;
        let mut out = vec![measure(
            "bsde_comparison",
            worst_over(y1.y(), y2.y(), 0, n, |a, b| a - b),
            COMPARISON_TOL,
            true,
        )];

        // Anchor-dependent quadratic-linear Volterra drivers.
        let gamma = match d {
            BuiltinDriver::Entropic { gamma } | BuiltinDriver::Cserm { gamma, .. } => *gamma,
            _ => 1.0,
        };
        let coef: Vec<(f64, f64)> = (0..=n)
            .map(|_| (rng.random_range(0.0..1.0), rng.random_range(-0.5..0.5)))
            .collect();
        let extra: Vec<TerminalClaim> = (0..=n)
            .map(|_| {
                TerminalClaim::new(
                    (0..m.terminal_count())
                        .map(|_| rng.random_range(0.0..bound))
                        .collect(),
                )
            })
            .collect();
        let vbump: Vec<AdaptedField> = (0..=n)
            .map(|_| random_adapted(m, n, &mut rng, bound))
            .collect();
        let h1 = FnVolterra(|i: usize, _at: StateRef, z: f64| {
            coef[i].0 * z * z / (2.0 * gamma) + coef[i].1 * z
        });
        let h2 = FnVolterra(|i: usize, at: StateRef, z: f64| {
            coef[i].0 * z * z / (2.0 * gamma) + coef[i].1 * z + vbump[i].get(at.step, at.state)
        });
        let fam1 = FamilyFn(|i: usize| Ok(phi1.scaled(1.0 - 0.5 * m.grid().time(i))));
        let fam2 = FamilyFn(|i: usize| Ok(&phi1.scaled(1.0 - 0.5 * m.grid().time(i)) + &extra[i]));
        let v1 = solve_bsvie(m, &h1, &fam1)?;
        let v2 = solve_bsvie(m, &h2, &fam2)?;
        out.push(measure(
            "bsvie_comparison",
            worst_over(v1.diagonal(), v2.diagonal(), 0, n, |a, b| a - b),
            COMPARISON_TOL,
            true,
        ));
        let same = solve_bsvie(m, &h1, &fam1)?;
        out.push(measure(
            "identical_inputs",
            v1.diagonal().max_abs_diff(same.diagonal()),
            0.0,
            true,
        ));
        let z = BuiltinDriver::Zero;
        let base = solve_bsde(m, &z, &phi1)?;
        let lifted = solve_bsde(m, &z, &phi1.map(|v| v + 1.0))?;
        out.push(measure(
            "unit_shift",
            worst_over(lifted.y(), base.y(), 0, n, |a, b| (a - b - 1.0).abs()),
            COMPARISON_TOL,
            true,
        ));
        Ok(out)
    })?;
    per.sort_by_key(|v| v.len());
    Ok(fold("comparison", "all".into(), seed, count, per))
}

/// Dual representation, penalty bounds, subdifferential membership and Young–Fenchel checks.
pub fn check_duality(kind: DriverKind, count: usize, seed: u64) -> Result<SuiteReport> {
    const EXTRA_CLAIMS: usize = 5;
    let per = run_instances(count, seed, |s| {
        let inst = instance_for(kind, s)?;
        let (m, d) = (&inst.model, &inst.driver);
        let n = m.steps();
        let mut rng = instance_rng(s, 3);
        let rho_y = risk_measure(m, d, &inst.y)?;
        let sc = extract_scenario(m, d, &rho_y)?;
        let mut out = Vec::new();

        let mut gap = 0.0f64;
        let mut pen_neg = 0.0f64;
        for t in 0..=n {
            gap = gap.max(dual_check(m, &sc, &rho_y, &inst.y, t)?.max_gap);
            pen_neg = pen_neg.max(-penalty_at(m, &sc, t)?.iter().fold(0.0f64, |a, b| a.min(*b)));
        }
        out.push(measure("dual_gap", gap, DUALITY_TOL, true));
        out.push(measure(
            "penalty_nonnegative",
            pen_neg,
            COMPARISON_TOL,
            true,
        ));

        let samples: Vec<TerminalClaim> = (0..EXTRA_CLAIMS)
            .map(|_| random_claim(m, &mut rng, inst.claim_bound))
            .collect::<Result<_>>()?;
        let c = penalty_at(m, &sc, inst.t)?;
        let mut upper = f64::NEG_INFINITY;
        for x in &samples {
            let e = discounted_expectation_field(m, &sc, &-x, inst.t)?;
            let rho_x = risk_measure(m, d, x)?;
            for (s, cs) in c.iter().enumerate() {
                upper = upper.max(e.get(inst.t, s) - rho_x.y().get(inst.t, s) - cs);
            }
        }
        out.push(measure("penalty_upper_bound", upper, AXIOM_TOL, true));

        let sub = subdifferential_test(m, d, &sc, &rho_y, &inst.y, &samples, inst.t)?;
        out.push(measure("subdifferential_membership", -sub, AXIOM_TOL, true));

        let (mut yf, mut attain) = (f64::NEG_INFINITY, 0.0f64);
        for _ in 0..20 {
            let k = rng.random_range(0..n);
            let at = StateRef::new(k, rng.random_range(0..m.state_count(k)));
            let (y0, z0) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let (y1, z1) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let p = d.select_scenario(at, y0, z0)?;
            if let Conjugate::Finite(g) = d.conjugate(at, p.beta, p.mu)? {
                let val = |y: f64, z: f64| d.evaluate(at, y, z) + g + p.beta * y + p.mu * z;
                yf = yf.max(-val(y1, z1));
                attain = attain.max(val(y0, z0).abs());
            }
        }
        out.push(measure("young_fenchel", yf, 1e-10, true));
        out.push(measure("attainment", attain, 1e-10, true));

        let from = rng.random_range(0..=n);
        let dens = pathwise_density(m, sc.tilt(), from)?;
        let mean = average_over_subtrees(m, &dens, from)?;
        let norm = mean.iter().fold(0.0f64, |w, v| w.max((v - 1.0).abs()));
        out.push(measure("density_normalization", norm, COMPARISON_TOL, true));
        Ok(out)
    })?;
    Ok(fold("duality", kind.tag().to_string(), seed, count, per))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_are_reproducible() {
        let spec = InstanceSpec::new(7, DriverKind::Entropic);
        assert_eq!(
            random_instance(&spec).unwrap(),
            random_instance(&spec).unwrap()
        );
    }

    #[test]
    fn seeds_change_claims() {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let hash = |seed: u64| {
            let inst =
                random_instance(&InstanceSpec::new(seed, DriverKind::Cserm).with_steps(5)).unwrap();
            let mut h = DefaultHasher::new();
            for v in inst.y.values() {
                v.to_bits().hash(&mut h);
            }
            h.finish()
        };
        assert_ne!(hash(1), hash(2));
    }

    #[test]
    fn oversized_instances_rejected() {
        let spec = InstanceSpec::new(1, DriverKind::Zero).with_steps(25);
        assert!(matches!(random_instance(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn parts_sum_to_aggregate() {
        let inst = random_instance(&InstanceSpec::new(3, DriverKind::LinearGeneric)).unwrap();
        let mut total = TerminalClaim::zero(&inst.model);
        for p in &inst.parts {
            total = &total + p;
        }
        assert!((&total - &inst.y).bound() < 1e-15);
        assert!((inst.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(inst.cash.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn small_suites_pass() {
        for kind in DriverKind::ALL {
            let r = check_risk_axioms(kind, 4, 11).unwrap();
            assert!(r.passed(), "{:?}", r.failures());
            let d = check_duality(kind, 4, 11).unwrap();
            assert!(d.passed(), "{:?}", d.failures());
        }
        let c = check_comparison(4, 11).unwrap();
        assert!(c.passed(), "{:?}", c.failures());
    }
}
