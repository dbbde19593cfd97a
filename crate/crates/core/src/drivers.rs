//! BSDE generators `g(t, y, z)`: evaluation, structural flags, scenario
//! selection and Fenchel conjugates.
//!
//! A scenario `(beta, mu)` selected at `(y, z)` satisfies the attainment
//! identity `G(beta, mu) = -g(y, z) - beta y - mu z`, where
//! `G(b, m) = sup_{y,z} { -b y - m z - g(y, z) }` is the conjugate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{AdaptedField, LatticeModel};

/// Position on the lattice at which a driver is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateRef {
    pub step: usize,
    pub state: usize,
}

impl StateRef {
    pub fn new(step: usize, state: usize) -> Self {
        Self { step, state }
    }
}

/// Declared structural properties of a driver.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DriverFlags {
    pub depends_on_y: bool,
    pub convex: bool,
    pub decreasing_in_y: bool,
    pub positively_homogeneous: bool,
    pub subadditive: bool,
}

impl DriverFlags {
    /// Positively homogeneous and subadditive.
    pub fn sublinear(&self) -> bool {
        self.positively_homogeneous && self.subadditive
    }
}

/// Lipschitz constants in `y` and `z`; `z` is infinite for quadratic drivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lipschitz {
    pub y: f64,
    pub z: f64,
}

/// Discount rate `beta` and drift `mu` of an optimal scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioPoint {
    pub beta: f64,
    pub mu: f64,
}

/// Value of the conjugate; `Infinite` marks points outside its domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Conjugate {
    Finite(f64),
    Infinite,
}

impl Conjugate {
    pub fn finite(self) -> Option<f64> {
        match self {
            Conjugate::Finite(v) => Some(v),
            Conjugate::Infinite => None,
        }
    }

    /// `+inf` for the sentinel.
    pub fn as_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

/// Generator of a backward equation on the lattice.
pub trait Driver: Send + Sync {
    fn name(&self) -> String;

    fn evaluate(&self, at: StateRef, y: f64, z: f64) -> f64;

    fn flags(&self) -> DriverFlags;

    fn lipschitz(&self) -> Lipschitz;

    /// A maximizer of `-beta y - mu z - G(beta, mu)`.
    fn select_scenario(&self, at: StateRef, y: f64, z: f64) -> Result<ScenarioPoint>;

    fn conjugate(&self, at: StateRef, b: f64, m: f64) -> Result<Conjugate>;

    /// `(dg/dy, dg/dz)` when the driver is differentiable.
    fn gradient(&self, _at: StateRef, _y: f64, _z: f64) -> Option<(f64, f64)> {
        None
    }

    /// Checks parameter shapes and bounds against a lattice.
    fn validate(&self, _model: &LatticeModel) -> Result<()> {
        Ok(())
    }
}

/// Driver parameter given as a constant, one value per step, or per step and state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamField {
    Constant(f64),
    PerStep(Vec<f64>),
    Field(Vec<Vec<f64>>),
}

impl ParamField {
    /// Per-state parameter built from an adapted field stored from step 0.
    pub fn from_adapted(field: &AdaptedField) -> Result<Self> {
        if field.first_step() != 0 {
            return Err(Error::Index(format!(
                "parameter fields must start at step 0, got {}",
                field.first_step()
            )));
        }
        Ok(ParamField::Field(
            field.rows().map(|(_, r)| r.to_vec()).collect(),
        ))
    }

    pub fn value(&self, at: StateRef) -> f64 {
        match self {
            ParamField::Constant(c) => *c,
            ParamField::PerStep(v) => v[at.step],
            ParamField::Field(v) => v[at.step][at.state],
        }
    }

    /// Whether the value at each step is the same for all states.
    pub fn is_deterministic(&self) -> bool {
        match self {
            ParamField::Constant(_) | ParamField::PerStep(_) => true,
            ParamField::Field(v) => v.iter().all(|r| r.iter().all(|x| *x == r[0])),
        }
    }

    fn all_values(&self) -> Vec<f64> {
        match self {
            ParamField::Constant(c) => vec![*c],
            ParamField::PerStep(v) => v.clone(),
            ParamField::Field(v) => v.iter().flatten().copied().collect(),
        }
    }

    pub fn sup_abs(&self) -> f64 {
        self.all_values().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Checks that the parameter is defined and finite at every step `0..N` state.
    pub fn validate(&self, model: &LatticeModel, name: &str) -> Result<()> {
        let n = model.steps();
        match self {
            ParamField::Constant(_) => {}
            ParamField::PerStep(v) => {
                if v.len() < n {
                    return Err(Error::Config(format!(
                        "parameter {name} needs {n} per-step values, got {}",
                        v.len()
                    )));
                }
            }
            ParamField::Field(v) => {
                if v.len() < n {
                    return Err(Error::Config(format!(
                        "parameter {name} needs {n} steps, got {}",
                        v.len()
                    )));
                }
                for (k, row) in v.iter().enumerate().take(n) {
                    if row.len() != model.state_count(k) {
                        return Err(Error::Config(format!(
                            "parameter {name} at step {k} needs {} states, got {}",
                            model.state_count(k),
                            row.len()
                        )));
                    }
                }
            }
        }
        if self.all_values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "parameter {name} has non-finite values"
            )));
        }
        Ok(())
    }

    fn check_nonnegative(&self, model: &LatticeModel, name: &str) -> Result<()> {
        self.validate(model, name)?;
        for k in 0..model.steps() {
            for s in 0..model.state_count(k) {
                let v = self.value(StateRef::new(k, s));
                if v < 0.0 {
                    return Err(Error::Config(format!(
                        "parameter {name} must be nonnegative, got {v} at step {k}, state {s}"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl From<f64> for ParamField {
    fn from(c: f64) -> Self {
        ParamField::Constant(c)
    }
}

/// Drivers with closed-form scenarios and conjugates.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinDriver {
    /// `g = 0`.
    Zero,
    /// `g = max(-r y, -R y)` with `0 <= r <= R`.
    LinearAmbiguous { r: ParamField, big_r: ParamField },
    /// `g = z^2 / (2 gamma)`.
    Entropic { gamma: f64 },
    /// `g = -beta y + z^2 / (2 gamma)` with `beta >= 0`.
    Cserm { beta: ParamField, gamma: f64 },
    /// `g = -beta y + lambda z` with `beta >= 0`.
    LinearGeneric {
        beta: ParamField,
        lambda: ParamField,
    },
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl BuiltinDriver {
    pub fn linear_ambiguous(r: impl Into<ParamField>, big_r: impl Into<ParamField>) -> Self {
        BuiltinDriver::LinearAmbiguous {
            r: r.into(),
            big_r: big_r.into(),
        }
    }

    pub fn entropic(gamma: f64) -> Result<Self> {
        Ok(BuiltinDriver::Entropic {
            gamma: positive("gamma", gamma)?,
        })
    }

    pub fn cserm(beta: impl Into<ParamField>, gamma: f64) -> Result<Self> {
        Ok(BuiltinDriver::Cserm {
            beta: beta.into(),
            gamma: positive("gamma", gamma)?,
        })
    }

    pub fn linear_generic(beta: impl Into<ParamField>, lambda: impl Into<ParamField>) -> Self {
        BuiltinDriver::LinearGeneric {
            beta: beta.into(),
            lambda: lambda.into(),
        }
    }

    /// Short tag used in reports and configuration files.
    pub fn tag(&self) -> &'static str {
        match self {
            BuiltinDriver::Zero => "zero",
            BuiltinDriver::LinearAmbiguous { .. } => "linear_ambiguous",
            BuiltinDriver::Entropic { .. } => "entropic",
            BuiltinDriver::Cserm { .. } => "cserm",
            BuiltinDriver::LinearGeneric { .. } => "linear_generic",
        }
    }
}

impl Driver for BuiltinDriver {
    fn name(&self) -> String {
        self.tag().to_string()
    }

    fn evaluate(&self, at: StateRef, y: f64, z: f64) -> f64 {
        match self {
            BuiltinDriver::Zero => 0.0,
            BuiltinDriver::LinearAmbiguous { r, big_r } => {
                (-r.value(at) * y).max(-big_r.value(at) * y)
            }
            BuiltinDriver::Entropic { gamma } => z * z / (2.0 * gamma),
            BuiltinDriver::Cserm { beta, gamma } => -beta.value(at) * y + z * z / (2.0 * gamma),
            BuiltinDriver::LinearGeneric { beta, lambda } => {
                -beta.value(at) * y + lambda.value(at) * z
            }
        }
    }

    fn flags(&self) -> DriverFlags {
        let linear = DriverFlags {
            depends_on_y: true,
            convex: true,
            decreasing_in_y: true,
            positively_homogeneous: true,
            subadditive: true,
        };
        match self {
            BuiltinDriver::Zero => DriverFlags {
                depends_on_y: false,
                ..linear
            },
            BuiltinDriver::LinearAmbiguous { .. } | BuiltinDriver::LinearGeneric { .. } => linear,
            BuiltinDriver::Entropic { .. } => DriverFlags {
                depends_on_y: false,
                convex: true,
                decreasing_in_y: true,
                positively_homogeneous: false,
                subadditive: false,
            },
            BuiltinDriver::Cserm { .. } => DriverFlags {
                depends_on_y: true,
                convex: true,
                decreasing_in_y: true,
                positively_homogeneous: false,
                subadditive: false,
            },
        }
    }

    fn lipschitz(&self) -> Lipschitz {
        match self {
            BuiltinDriver::Zero => Lipschitz { y: 0.0, z: 0.0 },
            BuiltinDriver::LinearAmbiguous { r, big_r } => Lipschitz {
                y: r.sup_abs().max(big_r.sup_abs()),
                z: 0.0,
            },
            BuiltinDriver::Entropic { .. } => Lipschitz {
                y: 0.0,
                z: f64::INFINITY,
            },
            BuiltinDriver::Cserm { beta, .. } => Lipschitz {
                y: beta.sup_abs(),
                z: f64::INFINITY,
            },
            BuiltinDriver::LinearGeneric { beta, lambda } => Lipschitz {
                y: beta.sup_abs(),
                z: lambda.sup_abs(),
            },
        }
    }

    fn select_scenario(&self, at: StateRef, y: f64, z: f64) -> Result<ScenarioPoint> {
        Ok(match self {
            BuiltinDriver::Zero => ScenarioPoint { beta: 0.0, mu: 0.0 },
            BuiltinDriver::LinearAmbiguous { r, big_r } => ScenarioPoint {
                beta: if y < 0.0 {
                    big_r.value(at)
                } else {
                    r.value(at)
                },
                mu: 0.0,
            },
            BuiltinDriver::Entropic { gamma } => ScenarioPoint {
                beta: 0.0,
                mu: -z / gamma,
            },
            BuiltinDriver::Cserm { beta, gamma } => ScenarioPoint {
                beta: beta.value(at),
                mu: -z / gamma,
            },
            BuiltinDriver::LinearGeneric { beta, lambda } => ScenarioPoint {
                beta: beta.value(at),
                mu: -lambda.value(at),
            },
        })
    }

    fn conjugate(&self, at: StateRef, b: f64, m: f64) -> Result<Conjugate> {
        let indicator = |inside: bool, v: f64| {
            if inside {
                Conjugate::Finite(v)
            } else {
                Conjugate::Infinite
            }
        };
        Ok(match self {
            BuiltinDriver::Zero => indicator(b == 0.0 && m == 0.0, 0.0),
            BuiltinDriver::LinearAmbiguous { r, big_r } => {
                indicator(r.value(at) <= b && b <= big_r.value(at) && m == 0.0, 0.0)
            }
            BuiltinDriver::Entropic { gamma } => indicator(b == 0.0, 0.5 * gamma * m * m),
            BuiltinDriver::Cserm { beta, gamma } => {
                indicator(b == beta.value(at), 0.5 * gamma * m * m)
            }
            BuiltinDriver::LinearGeneric { beta, lambda } => {
                indicator(b == beta.value(at) && m == -lambda.value(at), 0.0)
            }
        })
    }

    fn gradient(&self, at: StateRef, _y: f64, z: f64) -> Option<(f64, f64)> {
        match self {
            BuiltinDriver::Zero => Some((0.0, 0.0)),
            BuiltinDriver::LinearAmbiguous { .. } => None,
            BuiltinDriver::Entropic { gamma } => Some((0.0, z / gamma)),
            BuiltinDriver::Cserm { beta, gamma } => Some((-beta.value(at), z / gamma)),
            BuiltinDriver::LinearGeneric { beta, lambda } => {
                Some((-beta.value(at), lambda.value(at)))
            }
        }
    }

    fn validate(&self, model: &LatticeModel) -> Result<()> {
        match self {
            BuiltinDriver::Zero => Ok(()),
            BuiltinDriver::LinearAmbiguous { r, big_r } => {
                r.check_nonnegative(model, "r")?;
                big_r.validate(model, "R")?;
                for k in 0..model.steps() {
                    for s in 0..model.state_count(k) {
                        let at = StateRef::new(k, s);
                        if big_r.value(at) < r.value(at) {
                            return Err(Error::Config(format!(
                                "R must dominate r, got R = {} < r = {} at step {k}, state {s}",
                                big_r.value(at),
                                r.value(at)
                            )));
                        }
                    }
                }
                Ok(())
            }
            BuiltinDriver::Entropic { gamma } => positive("gamma", *gamma).map(|_| ()),
            BuiltinDriver::Cserm { beta, gamma } => {
                positive("gamma", *gamma)?;
                beta.check_nonnegative(model, "beta")
            }
            BuiltinDriver::LinearGeneric { beta, lambda } => {
                beta.check_nonnegative(model, "beta")?;
                lambda.validate(model, "lambda")
            }
        }
    }
}

/// Rectangle of `(y, z)` values searched by [`conjugate_numeric`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub y: (f64, f64),
    pub z: (f64, f64),
}

/// Rectangle of `(beta, mu)` candidates for grid-search scenario selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBox {
    pub beta: (f64, f64),
    pub mu: (f64, f64),
}

fn axis(name: &str, (lo, hi): (f64, f64), points: usize) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::Config(format!("empty {name} range [{lo}, {hi}]")));
    }
    if lo == hi {
        return Ok(vec![lo]);
    }
    if points < 2 {
        return Err(Error::Config(format!(
            "grid needs at least 2 points per axis, got {points}"
        )));
    }
    let step = (hi - lo) / (points - 1) as f64;
    Ok((0..points)
        .map(|i| {
            if i + 1 == points {
                hi
            } else {
                lo + i as f64 * step
            }
        })
        .collect())
}

/// Lower bound of `G(b, m)` by maximizing `-b y - m z - g(y, z)` over a grid on `search`.
///
/// A degenerate axis (`lo == hi`) contributes a single point.
pub fn conjugate_numeric(
    driver: &dyn Driver,
    at: StateRef,
    b: f64,
    m: f64,
    search: &SearchBox,
    grid_points: usize,
) -> Result<f64> {
    let ys = axis("y", search.y, grid_points)?;
    let zs = axis("z", search.z, grid_points)?;
    let mut best = f64::NEG_INFINITY;
    for &y in &ys {
        for &z in &zs {
            best = best.max(-b * y - m * z - driver.evaluate(at, y, z));
        }
    }
    Ok(best)
}

type EvalFn = dyn Fn(StateRef, f64, f64) -> f64 + Send + Sync;
type SelectFn = dyn Fn(StateRef, f64, f64) -> ScenarioPoint + Send + Sync;
type ConjugateFn = dyn Fn(StateRef, f64, f64) -> Conjugate + Send + Sync;

/// Grid-search configuration used when a custom driver has no selector or conjugate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridFallback {
    pub scenarios: ScenarioBox,
    pub scenario_points: usize,
    pub search: SearchBox,
    pub search_points: usize,
}

/// User-supplied driver given by closures.
pub struct CustomDriver {
    name: String,
    eval: Box<EvalFn>,
    flags: DriverFlags,
    lipschitz: Lipschitz,
    selector: Option<Box<SelectFn>>,
    conjugate: Option<Box<ConjugateFn>>,
    fallback: Option<GridFallback>,
}

impl CustomDriver {
    pub fn new(
        name: impl Into<String>,
        flags: DriverFlags,
        lipschitz: Lipschitz,
        eval: impl Fn(StateRef, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            eval: Box::new(eval),
            flags,
            lipschitz,
            selector: None,
            conjugate: None,
            fallback: None,
        }
    }

    pub fn with_selector(
        mut self,
        f: impl Fn(StateRef, f64, f64) -> ScenarioPoint + Send + Sync + 'static,
    ) -> Self {
        self.selector = Some(Box::new(f));
        self
    }

    pub fn with_conjugate(
        mut self,
        f: impl Fn(StateRef, f64, f64) -> Conjugate + Send + Sync + 'static,
    ) -> Self {
        self.conjugate = Some(Box::new(f));
        self
    }

    pub fn with_grid_fallback(mut self, fallback: GridFallback) -> Self {
        self.fallback = Some(fallback);
        self
    }
}

impl Driver for CustomDriver {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn evaluate(&self, at: StateRef, y: f64, z: f64) -> f64 {
        (self.eval)(at, y, z)
    }

    fn flags(&self) -> DriverFlags {
        self.flags
    }

    fn lipschitz(&self) -> Lipschitz {
        self.lipschitz
    }

    fn select_scenario(&self, at: StateRef, y: f64, z: f64) -> Result<ScenarioPoint> {
        if let Some(f) = &self.selector {
            return Ok(f(at, y, z));
        }
        let fb = self.fallback.ok_or_else(|| {
            Error::Capability(format!(
                "driver {} has neither a scenario selector nor a grid fallback",
                self.name
            ))
        })?;
        let betas = axis("beta", fb.scenarios.beta, fb.scenario_points)?;
        let mus = axis("mu", fb.scenarios.mu, fb.scenario_points)?;
        let mut best: Option<(f64, ScenarioPoint)> = None;
        for &beta in &betas {
            for &mu in &mus {
                let g = match self.conjugate(at, beta, mu)? {
                    Conjugate::Finite(g) => g,
                    Conjugate::Infinite => continue,
                };
                let score = -beta * y - mu * z - g;
                if best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, ScenarioPoint { beta, mu }));
                }
            }
        }
        best.map(|(_, p)| p).ok_or_else(|| {
            Error::Capability(format!(
                "grid fallback of driver {} found no finite conjugate value",
                self.name
            ))
        })
    }

    fn conjugate(&self, at: StateRef, b: f64, m: f64) -> Result<Conjugate> {
        if let Some(f) = &self.conjugate {
            return Ok(f(at, b, m));
        }
        let fb = self.fallback.ok_or_else(|| {
            Error::Capability(format!(
                "driver {} has neither a conjugate nor a grid fallback",
                self.name
            ))
        })?;
        conjugate_numeric(self, at, b, m, &fb.search, fb.search_points).map(Conjugate::Finite)
    }
}

/// Outcome of [`validate_flags`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlagReport {
    pub driver: String,
    pub samples: usize,
    pub convex: bool,
    pub decreasing_in_y: bool,
    pub positively_homogeneous: bool,
    pub subadditive: bool,
    pub lipschitz_y_estimate: f64,
    pub lipschitz_z_estimate: f64,
    pub violations: Vec<String>,
}

/// Samples `(y, z)` pairs at the origin state and tests the declared flags.
pub fn validate_flags(driver: &dyn Driver, sample_count: usize, seed: u64) -> FlagReport {
    const RANGE: f64 = 5.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let at = StateRef::new(0, 0);
    let g = |y: f64, z: f64| driver.evaluate(at, y, z);
    let tol = |scale: f64| 1e-10 * (1.0 + scale);
    let mut convex = true;
    let mut decreasing = true;
    let mut homogeneous = true;
    let mut subadditive = true;
    let mut ly: f64 = 0.0;
    let mut lz: f64 = 0.0;
    for _ in 0..sample_count.max(1) {
        let (y1, z1) = (
            rng.random_range(-RANGE..RANGE),
            rng.random_range(-RANGE..RANGE),
        );
        let (y2, z2) = (
            rng.random_range(-RANGE..RANGE),
            rng.random_range(-RANGE..RANGE),
        );
        let a: f64 = rng.random_range(0.0..3.0);
        let (g1, g2) = (g(y1, z1), g(y2, z2));
        let scale = g1.abs() + g2.abs();
        if g(0.5 * (y1 + y2), 0.5 * (z1 + z2)) > 0.5 * (g1 + g2) + tol(scale) {
            convex = false;
        }
        let (lo, hi) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
        if g(hi, z1) > g(lo, z1) + tol(scale) {
            decreasing = false;
        }
        if (g(a * y1, a * z1) - a * g1).abs() > tol(scale * (1.0 + a)) {
            homogeneous = false;
        }
        if g(y1 + y2, z1 + z2) > g1 + g2 + tol(scale) {
            subadditive = false;
        }
        if y1 != y2 {
            ly = ly.max((g(y1, z1) - g(y2, z1)).abs() / (y1 - y2).abs());
        }
        if z1 != z2 {
            lz = lz.max((g(y1, z1) - g(y1, z2)).abs() / (z1 - z2).abs());
        }
    }
    let declared = driver.flags();
    let lip = driver.lipschitz();
    let mut violations = Vec::new();
    let mut flag = |name: &str, declared: bool, observed: bool| {
        if declared && !observed {
            violations.push(format!("declared {name} but a sampled pair violates it"));
        }
    };
    flag("convex", declared.convex, convex);
    flag("decreasing_in_y", declared.decreasing_in_y, decreasing);
    flag(
        "positively_homogeneous",
        declared.positively_homogeneous,
        homogeneous,
    );
    flag("subadditive", declared.subadditive, subadditive);
    if ly > lip.y * (1.0 + 1e-9) + 1e-12 {
        violations.push(format!(
            "estimated Lipschitz constant in y {ly} exceeds declared {}",
            lip.y
        ));
    }
    if lz > lip.z * (1.0 + 1e-9) + 1e-12 {
        violations.push(format!(
            "estimated Lipschitz constant in z {lz} exceeds declared {}",
            lip.z
        ));
    }
    if !declared.depends_on_y && ly > 0.0 {
        violations.push("declared independent of y but g varies with y".into());
    }
    FlagReport {
        driver: driver.name(),
        samples: sample_count.max(1),
        convex,
        decreasing_in_y: decreasing,
        positively_homogeneous: homogeneous,
        subadditive,
        lipschitz_y_estimate: ly,
        lipschitz_z_estimate: lz,
        violations,
    }
}
