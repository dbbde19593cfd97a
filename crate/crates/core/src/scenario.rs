//! Optimal scenarios `(beta, mu)` along a solved risk measure, their discounts,
//! densities and penalties, and checks of the dual representation
//! `rho_t(X) = E^mu[D(t, N) (-X) | F_t] - c_t`.
//!
//! With the implicit convention the one-step discount is `d_k = 1 / (1 + beta_k delta)`,
//! `D(i, k) = d_i ... d_{k-1}`, and the penalty is
//! `c_t = E^mu[ sum_{k >= t} D(t, k + 1) G_k delta | F_t ]`. Under this convention the
//! backward scheme satisfies `rho_k = d_k (E^mu[rho_{k+1} | F_k] - G_k delta)` exactly.

use serde::{Deserialize, Serialize};

use crate::bsde::BsdeSolution;
use crate::drivers::{Driver, StateRef};
use crate::error::{Error, Result};
use crate::lattice::{
    average_over_subtrees, conditional_expectation, pathwise_density, tilt_probabilities,
    AdaptedField, LatticeModel, Layout, MeasureTilt, TerminalClaim,
};

/// One-step discount factor attached to a discount rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscountConvention {
    /// `1 / (1 + beta delta)`, consistent with the implicit backward scheme.
    #[default]
    Implicit,
    /// `exp(-beta delta)`.
    Exponential,
}

impl DiscountConvention {
    pub fn factor(self, beta: f64, delta: f64) -> f64 {
        match self {
            DiscountConvention::Implicit => 1.0 / (1.0 + beta * delta),
            DiscountConvention::Exponential => (-beta * delta).exp(),
        }
    }
}

/// Adapted scenario fields on steps `0..N`, with the conjugate along them.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    beta: AdaptedField,
    mu: AdaptedField,
    conjugate: AdaptedField,
    convention: DiscountConvention,
    tilt: MeasureTilt,
    delta: f64,
}

impl Scenario {
    /// Scenario from explicit fields on steps `0..N`; `conjugate` may hold `+inf`.
    pub fn new(
        model: &LatticeModel,
        beta: AdaptedField,
        mu: AdaptedField,
        conjugate: AdaptedField,
    ) -> Result<Self> {
        let n = model.steps();
        for (name, f) in [("beta", &beta), ("mu", &mu), ("conjugate", &conjugate)] {
            f.check_shape(model)?;
            if f.first_step() != 0 || f.last_step() + 1 != n {
                return Err(Error::Index(format!(
                    "scenario field {name} must cover steps 0..{n}"
                )));
            }
        }
        for (k, row) in beta.rows() {
            if let Some(s) = row.iter().position(|b| b.is_nan() || *b < 0.0) {
                return Err(Error::Config(format!(
                    "discount rate must be nonnegative, got {} at step {k}, state {s}",
                    row[s]
                )));
            }
        }
        let tilt = tilt_probabilities(model, &mu)?;
        Ok(Self {
            beta,
            mu,
            conjugate,
            convention: DiscountConvention::Implicit,
            tilt,
            delta: model.delta(),
        })
    }

    pub fn with_convention(mut self, convention: DiscountConvention) -> Self {
        self.convention = convention;
        self
    }

    pub fn beta(&self) -> &AdaptedField {
        &self.beta
    }

    pub fn mu(&self) -> &AdaptedField {
        &self.mu
    }

    /// `G(k, beta_k, mu_k)`; `+inf` off the conjugate domain.
    pub fn conjugate(&self) -> &AdaptedField {
        &self.conjugate
    }

    pub fn convention(&self) -> DiscountConvention {
        self.convention
    }

    /// Up-probabilities of the measure induced by `mu`.
    pub fn tilt(&self) -> &MeasureTilt {
        &self.tilt
    }

    /// `d_k` at step-`k` state `s`.
    pub fn step_discount(&self, k: usize, s: usize) -> f64 {
        self.convention.factor(self.beta.get(k, s), self.delta)
    }

    fn finite_conjugate(&self, k: usize, s: usize) -> Result<f64> {
        let g = self.conjugate.get(k, s);
        if g.is_finite() {
            Ok(g)
        } else {
            Err(Error::ScenarioInfeasible { step: k, state: s })
        }
    }
}

/// Selects `(beta_k, mu_k)` at `(rho_k, Z_k)` for every step `k < N` and state.
pub fn extract_scenario(
    model: &LatticeModel,
    driver: &dyn Driver,
    rho: &BsdeSolution,
) -> Result<Scenario> {
    let n = model.steps();
    if rho.start_step() != 0 || !rho.y().covers(n) {
        return Err(Error::Index(
            "scenario extraction needs a solution on all steps 0..=N".into(),
        ));
    }
    let mut beta = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    let mut conj = Vec::with_capacity(n);
    for k in 0..n {
        let (ys, zs) = (rho.value_at(k), rho.z().at(k));
        let mut b = Vec::with_capacity(ys.len());
        let mut m = Vec::with_capacity(ys.len());
        let mut g = Vec::with_capacity(ys.len());
        for s in 0..ys.len() {
            let at = StateRef::new(k, s);
            let p = driver.select_scenario(at, ys[s], zs[s])?;
            b.push(p.beta);
            m.push(p.mu);
            g.push(driver.conjugate(at, p.beta, p.mu)?.as_f64());
        }
        beta.push(b);
        mu.push(m);
        conj.push(g);
    }
    Scenario::new(
        model,
        AdaptedField::new(0, beta),
        AdaptedField::new(0, mu),
        AdaptedField::new(0, conj),
    )
}

/// `D(i, k) = prod_{m=i}^{k-1} d_m` as values at step `k`.
///
/// The node layout needs a state-independent `beta` on `[i, k)`.
pub fn discount_between(
    model: &LatticeModel,
    scenario: &Scenario,
    i: usize,
    k: usize,
) -> Result<Vec<f64>> {
    if i > k || k > model.steps() {
        return Err(Error::Index(format!(
            "discount from step {i} to step {k} on a {}-step lattice",
            model.steps()
        )));
    }
    match model.layout() {
        Layout::Path => Ok((0..model.state_count(k))
            .map(|s| {
                (i..k).fold(1.0, |d, m| {
                    d * scenario.step_discount(m, model.ancestor(m, s))
                })
            })
            .collect()),
        Layout::Node => {
            let mut d = 1.0;
            for m in i..k {
                let row = scenario.beta.at(m);
                if row.iter().any(|b| *b != row[0]) {
                    return Err(Error::Layout(
                        "discounts of a state-dependent rate require the path layout".into(),
                    ));
                }
                d *= scenario.step_discount(m, 0);
            }
            Ok(vec![d; model.state_count(k)])
        }
    }
}

/// Per-path `D(t, N) L(N, t)`: maturity discount times the likelihood ratio of the tilt.
pub fn scenario_density(model: &LatticeModel, scenario: &Scenario, t: usize) -> Result<Vec<f64>> {
    model.require_path("scenario densities")?;
    let l = pathwise_density(model, &scenario.tilt, t)?;
    let d = discount_between(model, scenario, t, model.steps())?;
    Ok(l.iter().zip(&d).map(|(a, b)| a * b).collect())
}

/// Tilted expectation and penalty fields from a pathwise sweep (path layout).
pub(crate) struct Sweep {
    /// `E^mu[D(t, N) f | F_t]` on steps `stop..=N`.
    pub expectation: AdaptedField,
    /// `c_t` on steps `stop..=N`.
    pub penalty: AdaptedField,
}

/// Accumulates per-path likelihood, discount and penalty sums from `N` down to `stop`.
pub(crate) fn pathwise_sweep(
    model: &LatticeModel,
    scenario: &Scenario,
    f: &TerminalClaim,
    stop: usize,
) -> Result<Sweep> {
    model.require_path("pathwise scenario sums")?;
    f.check_shape(model)?;
    let n = model.steps();
    let paths = model.terminal_count();
    let delta = model.delta();
    let mut lik = vec![1.0; paths];
    let mut disc = vec![1.0; paths];
    let mut pen = vec![0.0; paths];
    let mut exp_rows = vec![f.values().to_vec()];
    let mut pen_rows = vec![vec![0.0; paths]];
    for t in (stop..n).rev() {
        let mask = (1usize << t) - 1;
        let p_up = scenario.tilt.p_up().at(t);
        for p in 0..paths {
            let s = p & mask;
            let d = scenario.step_discount(t, s);
            let g = scenario.finite_conjugate(t, s)?;
            let q = p_up[s];
            lik[p] *= if (p >> t) & 1 == 1 {
                2.0 * q
            } else {
                2.0 * (1.0 - q)
            };
            disc[p] *= d;
            pen[p] = d * (g * delta + pen[p]);
        }
        let weighted: Vec<f64> = (0..paths)
            .map(|p| lik[p] * disc[p] * f.values()[p])
            .collect();
        let penalised: Vec<f64> = (0..paths).map(|p| lik[p] * pen[p]).collect();
        exp_rows.push(average_over_subtrees(model, &weighted, t)?);
        pen_rows.push(average_over_subtrees(model, &penalised, t)?);
    }
    exp_rows.reverse();
    pen_rows.reverse();
    // The step-N rows hold per-path values, which are the step-N states.
    Ok(Sweep {
        expectation: AdaptedField::new(stop, exp_rows),
        penalty: AdaptedField::new(stop, pen_rows),
    })
}

/// Backward recursion `V_k = d_k (E^mu[V_{k+1} | F_k] + G_k delta w)` from `V_N = f`,
/// with `w = 1` for the penalty and `w = 0` for the expectation.
fn recursion(
    model: &LatticeModel,
    scenario: &Scenario,
    terminal: Vec<f64>,
    with_conjugate: bool,
    stop: usize,
) -> Result<AdaptedField> {
    let n = model.steps();
    let delta = model.delta();
    let mut rows = vec![terminal];
    for k in (stop..n).rev() {
        let e = conditional_expectation(model, rows.last().unwrap(), k, Some(&scenario.tilt))?;
        let row = e
            .iter()
            .enumerate()
            .map(|(s, v)| {
                let g = if with_conjugate {
                    scenario.finite_conjugate(k, s)? * delta
                } else {
                    0.0
                };
                Ok(scenario.step_discount(k, s) * (v + g))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    rows.reverse();
    Ok(AdaptedField::new(stop, rows))
}

/// `c_t` on steps `stop..=N`.
pub fn penalty_field(
    model: &LatticeModel,
    scenario: &Scenario,
    stop: usize,
) -> Result<AdaptedField> {
    match model.layout() {
        Layout::Path => {
            Ok(pathwise_sweep(model, scenario, &TerminalClaim::zero(model), stop)?.penalty)
        }
        Layout::Node => recursion(
            model,
            scenario,
            vec![0.0; model.terminal_count()],
            true,
            stop,
        ),
    }
}

/// `c_t = E^mu[ sum_{k >= t} D(t, k + 1) G_k delta | F_t ]` at step `t`.
pub fn penalty_at(model: &LatticeModel, scenario: &Scenario, t: usize) -> Result<Vec<f64>> {
    if t > model.steps() {
        return Err(Error::Index(format!("penalty at step {t} beyond horizon")));
    }
    Ok(penalty_field(model, scenario, t)?.at(t).to_vec())
}

/// `E^mu[D(t, N) f | F_t]` on steps `stop..=N`.
pub fn discounted_expectation_field(
    model: &LatticeModel,
    scenario: &Scenario,
    f: &TerminalClaim,
    stop: usize,
) -> Result<AdaptedField> {
    f.check_shape(model)?;
    match model.layout() {
        Layout::Path => Ok(pathwise_sweep(model, scenario, f, stop)?.expectation),
        Layout::Node => recursion(model, scenario, f.values().to_vec(), false, stop),
    }
}

/// Per-state comparison of `rho_t` with its dual representation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualCheck {
    pub expectation: Vec<f64>,
    pub penalty: Vec<f64>,
    pub gaps: Vec<f64>,
    pub max_gap: f64,
}

/// `|rho_t(X) - (E^mu[D(t, N)(-X) | F_t] - c_t)|` at every step-`t` state.
pub fn dual_check(
    model: &LatticeModel,
    scenario: &Scenario,
    rho: &BsdeSolution,
    claim: &TerminalClaim,
    t: usize,
) -> Result<DualCheck> {
    let neg = -claim;
    let (expectation, penalty) = match model.layout() {
        Layout::Path => {
            let sw = pathwise_sweep(model, scenario, &neg, t)?;
            (sw.expectation.at(t).to_vec(), sw.penalty.at(t).to_vec())
        }
        Layout::Node => (
            discounted_expectation_field(model, scenario, &neg, t)?
                .at(t)
                .to_vec(),
            penalty_at(model, scenario, t)?,
        ),
    };
    let gaps: Vec<f64> = rho
        .y()
        .try_at(t)?
        .iter()
        .zip(expectation.iter().zip(&penalty))
        .map(|(r, (e, c))| (r - (e - c)).abs())
        .collect();
    let max_gap = gaps.iter().fold(0.0, |m: f64, g| m.max(*g));
    Ok(DualCheck {
        expectation,
        penalty,
        gaps,
        max_gap,
    })
}

/// Minimum over samples and step-`t` states of
/// `rho_t(X) - rho_t(Y) - E^mu[D(t, N)(-(X - Y)) | F_t]`, with the scenario taken at `Y`.
pub fn subdifferential_test(
    model: &LatticeModel,
    driver: &dyn Driver,
    scenario: &Scenario,
    rho_y: &BsdeSolution,
    y: &TerminalClaim,
    samples: &[TerminalClaim],
    t: usize,
) -> Result<f64> {
    let mut worst = f64::INFINITY;
    let base = rho_y.y().try_at(t)?;
    for x in samples {
        let rho_x = crate::bsde::risk_measure(model, driver, x)?;
        let diff = &-x + y;
        let lin = discounted_expectation_field(model, scenario, &diff, t)?;
        for (s, (rx, ry)) in rho_x.value_at(t).iter().zip(base).enumerate() {
            worst = worst.min(rx - ry - lin.get(t, s));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::risk_measure;
    use crate::drivers::BuiltinDriver;

    fn entropic_instance() -> (LatticeModel, BuiltinDriver, TerminalClaim, BsdeSolution) {
        let m = LatticeModel::with(1.0, 2, Layout::Path).unwrap();
        let d = BuiltinDriver::entropic(1.0).unwrap();
        let x = m.claim_of_terminal(|b| -b);
        let rho = risk_measure(&m, &d, &x).unwrap();
        (m, d, x, rho)
    }

    #[test]
    fn entropic_dual_chain() {
        let (m, d, x, rho) = entropic_instance();
        let sc = extract_scenario(&m, &d, &rho).unwrap();
        assert!(sc
            .mu()
            .rows()
            .all(|(_, r)| r.iter().all(|v| (v + 1.0).abs() < 1e-14)));
        assert!(sc.beta().rows().all(|(_, r)| r.iter().all(|v| *v == 0.0)));
        let e = discounted_expectation_field(&m, &sc, &m.claim_of_terminal(|b| b), 0).unwrap();
        assert!((e.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((penalty_at(&m, &sc, 0).unwrap()[0] - 0.5).abs() < 1e-12);
        assert!(dual_check(&m, &sc, &rho, &x, 0).unwrap().max_gap < 1e-12);
    }

    #[test]
    fn ambiguous_discount_scenario() {
        let m = LatticeModel::with(1.0, 4, Layout::Path).unwrap();
        let d = BuiltinDriver::linear_ambiguous(0.05, 0.1);
        let x = TerminalClaim::constant(&m, -1.0);
        let rho = risk_measure(&m, &d, &x).unwrap();
        let sc = extract_scenario(&m, &d, &rho).unwrap();
        assert!(sc.beta().rows().all(|(_, r)| r.iter().all(|v| *v == 0.05)));
        assert_eq!(penalty_at(&m, &sc, 0).unwrap(), vec![0.0]);
        let dual = dual_check(&m, &sc, &rho, &x, 0).unwrap();
        assert!(dual.max_gap < 1e-12, "{}", dual.max_gap);
        let implicit = discount_between(&m, &sc, 0, 4).unwrap();
        assert!((implicit[0] - 1.0125f64.powi(-4)).abs() < 1e-15);
        let exp = sc.with_convention(DiscountConvention::Exponential);
        let d0 = discount_between(&m, &exp, 0, 4).unwrap();
        assert!(d0.iter().all(|v| (v - (-0.05f64).exp()).abs() < 1e-15));
        assert_eq!(discount_between(&m, &exp, 2, 2).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn densities() {
        let m = LatticeModel::with(1.0, 1, Layout::Path).unwrap();
        let one = |v: f64| AdaptedField::new(0, vec![vec![v]]);
        let sc = Scenario::new(&m, one(0.0), one(-1.0), one(0.5)).unwrap();
        assert_eq!(scenario_density(&m, &sc, 0).unwrap(), vec![0.0, 2.0]);
        let flat = Scenario::new(&m, one(0.0), one(0.0), one(0.0)).unwrap();
        assert_eq!(scenario_density(&m, &flat, 0).unwrap(), vec![1.0, 1.0]);
        let m4 = LatticeModel::with(1.0, 4, Layout::Path).unwrap();
        let c = |v: f64| AdaptedField::deterministic(&m4, 0, 3, move |_| v);
        let disc = Scenario::new(&m4, c(0.05), c(0.0), c(0.0))
            .unwrap()
            .with_convention(DiscountConvention::Exponential);
        assert!(scenario_density(&m4, &disc, 0)
            .unwrap()
            .iter()
            .all(|v| (v - (-0.05f64).exp()).abs() < 1e-15));
    }

    #[test]
    fn infeasible_scenario_rejected() {
        let m = LatticeModel::with(1.0, 2, Layout::Path).unwrap();
        let f = |v: f64| AdaptedField::deterministic(&m, 0, 1, move |_| v);
        let g = AdaptedField::from_fn(
            &m,
            0,
            1,
            |k, s| {
                if k == 1 && s == 1 {
                    f64::INFINITY
                } else {
                    0.0
                }
            },
        );
        let sc = Scenario::new(&m, f(0.0), f(0.0), g).unwrap();
        assert_eq!(
            penalty_at(&m, &sc, 0),
            Err(Error::ScenarioInfeasible { step: 1, state: 1 })
        );
        assert_eq!(penalty_at(&m, &sc, 2).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn node_layout_recursion_matches_paths() {
        let d = BuiltinDriver::cserm(0.2, 1.1).unwrap();
        let f = |b: f64| 0.3 * b - 0.2 * (b * b).min(1.0);
        let path = LatticeModel::with(1.0, 6, Layout::Path).unwrap();
        let node = LatticeModel::with(1.0, 6, Layout::Node).unwrap();
        let sp = extract_scenario(
            &path,
            &d,
            &risk_measure(&path, &d, &path.claim_of_terminal(f)).unwrap(),
        )
        .unwrap();
        let sn = extract_scenario(
            &node,
            &d,
            &risk_measure(&node, &d, &node.claim_of_terminal(f)).unwrap(),
        )
        .unwrap();
        let cp = penalty_at(&path, &sp, 0).unwrap()[0];
        let cn = penalty_at(&node, &sn, 0).unwrap()[0];
        assert!((cp - cn).abs() < 1e-13);
        let ep =
            discounted_expectation_field(&path, &sp, &path.claim_of_terminal(|b| b), 0).unwrap();
        let en =
            discounted_expectation_field(&node, &sn, &node.claim_of_terminal(|b| b), 0).unwrap();
        assert!((ep.get(0, 0) - en.get(0, 0)).abs() < 1e-13);
    }

    #[test]
    fn subdifferential_equality_case() {
        let (m, d, x, rho) = entropic_instance();
        let sc = extract_scenario(&m, &d, &rho).unwrap();
        assert_eq!(
            subdifferential_test(&m, &d, &sc, &rho, &x, std::slice::from_ref(&x), 0).unwrap(),
            0.0
        );
    }
}
