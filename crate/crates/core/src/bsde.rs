//! Backward induction for `Y_k = E[Y_{k+1} | F_k] + g(t_k, Y_k, Z_k) delta`,
//! implicit in `y` and explicit in `z`, and the risk measure `rho_t(X) = Y_t^{-X}`.

use rayon::prelude::*;

use crate::drivers::{Driver, StateRef};
use crate::error::{Error, Result};
use crate::lattice::{
    conditional_expectation, martingale_component, AdaptedField, LatticeModel, TerminalClaim,
    PARALLEL_THRESHOLD,
};

/// Relative stopping tolerance of the per-state fixed-point solve.
pub const PICARD_TOLERANCE: f64 = 1e-12;
/// Iteration cap of the per-state fixed-point solve.
pub const PICARD_MAX_ITERATIONS: usize = 100;

/// Adapted pair `(Y, Z)` on steps `start..=end` and `start..end`.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    y: AdaptedField,
    z: AdaptedField,
    picard_iterations_max: usize,
}

impl BsdeSolution {
    pub fn y(&self) -> &AdaptedField {
        &self.y
    }

    pub fn z(&self) -> &AdaptedField {
        &self.z
    }

    /// `Y` at step `k`.
    pub fn value_at(&self, k: usize) -> &[f64] {
        self.y.at(k)
    }

    /// `Y` at the first solved step, state 0.
    pub fn root(&self) -> f64 {
        self.y.at(self.y.first_step())[0]
    }

    pub fn start_step(&self) -> usize {
        self.y.first_step()
    }

    /// Largest number of fixed-point iterations used at any state; 0 for explicit steps.
    pub fn picard_iterations_max(&self) -> usize {
        self.picard_iterations_max
    }
}

/// One backward step: maps `(state, E[Y_{k+1}|F_k], Z_k)` to `(Y_k, iterations)`.
pub(crate) fn induct<F>(
    model: &LatticeModel,
    end_step: usize,
    end_values: Vec<f64>,
    start_step: usize,
    step: F,
) -> Result<BsdeSolution>
where
    F: Fn(StateRef, f64, f64) -> Result<(f64, usize)> + Sync,
{
    if start_step > end_step || end_step > model.steps() {
        return Err(Error::Index(format!(
            "backward solve from step {end_step} to step {start_step} on a {}-step lattice",
            model.steps()
        )));
    }
    if end_values.len() != model.state_count(end_step) {
        return Err(Error::Shape {
            expected: model.state_count(end_step),
            actual: end_values.len(),
        });
    }
    let mut ys = vec![end_values];
    let mut zs = Vec::with_capacity(end_step - start_step);
    let mut iterations = 0;
    for k in (start_step..end_step).rev() {
        let next = ys.last().expect("at least the end values");
        let e = conditional_expectation(model, next, k, None)?;
        let z = martingale_component(model, next, k)?;
        let one = |s: usize| step(StateRef::new(k, s), e[s], z[s]);
        let n = model.state_count(k);
        let solved: Vec<(f64, usize)> = if n >= PARALLEL_THRESHOLD {
            (0..n).into_par_iter().map(one).collect::<Result<_>>()?
        } else {
            (0..n).map(one).collect::<Result<_>>()?
        };
        iterations = solved.iter().fold(iterations, |m, (_, it)| m.max(*it));
        ys.push(solved.into_iter().map(|(y, _)| y).collect());
        zs.push(z);
    }
    ys.reverse();
    zs.reverse();
    Ok(BsdeSolution {
        y: AdaptedField::new(start_step, ys),
        z: AdaptedField::new(start_step, zs),
        picard_iterations_max: iterations,
    })
}

/// Solves `y = e + g(at, y, z) delta` by fixed-point iteration started at `e`.
pub(crate) fn implicit_step(
    driver: &dyn Driver,
    delta: f64,
    at: StateRef,
    e: f64,
    z: f64,
) -> Result<(f64, usize)> {
    if !driver.flags().depends_on_y {
        return Ok((e + driver.evaluate(at, e, z) * delta, 0));
    }
    let mut y = e;
    let mut residual = f64::INFINITY;
    for it in 1..=PICARD_MAX_ITERATIONS {
        let next = e + driver.evaluate(at, y, z) * delta;
        residual = (next - y).abs();
        y = next;
        if residual <= PICARD_TOLERANCE * (1.0 + y.abs()) {
            return Ok((y, it));
        }
    }
    Err(Error::NonConvergence {
        step: at.step,
        state: at.state,
        residual,
    })
}

fn check_contraction(model: &LatticeModel, driver: &dyn Driver) -> Result<()> {
    if driver.flags().depends_on_y {
        let product = driver.lipschitz().y * model.delta();
        if product.is_nan() || product >= 1.0 {
            return Err(Error::StepSize { product });
        }
    }
    Ok(())
}

/// Solves the BSDE with generator `driver` and terminal value `terminal` on steps `0..=N`.
pub fn solve_bsde(
    model: &LatticeModel,
    driver: &dyn Driver,
    terminal: &TerminalClaim,
) -> Result<BsdeSolution> {
    terminal.check_shape(model)?;
    solve_bsde_from(model, driver, model.steps(), terminal.values(), 0)
}

/// Solves backward from `end_values` at `end_step` down to `start_step`.
pub fn solve_bsde_from(
    model: &LatticeModel,
    driver: &dyn Driver,
    end_step: usize,
    end_values: &[f64],
    start_step: usize,
) -> Result<BsdeSolution> {
    driver.validate(model)?;
    check_contraction(model, driver)?;
    let delta = model.delta();
    induct(
        model,
        end_step,
        end_values.to_vec(),
        start_step,
        |at, e, z| implicit_step(driver, delta, at, e, z),
    )
}

/// `rho_t(X)` for all `t`: the BSDE solution with terminal value `-X`.
pub fn risk_measure(
    model: &LatticeModel,
    driver: &dyn Driver,
    claim: &TerminalClaim,
) -> Result<BsdeSolution> {
    solve_bsde(model, driver, &-claim)
}

/// `max |rho_s(X) - rho_s(-rho_t(X))|` over step-`s` states, re-solving on `[s, t]`.
pub fn flow_consistency_check(
    model: &LatticeModel,
    driver: &dyn Driver,
    solution: &BsdeSolution,
    s: usize,
    t: usize,
) -> Result<f64> {
    if s > t {
        return Err(Error::Index(format!(
            "flow check from step {s} after step {t}"
        )));
    }
    let restart = solve_bsde_from(model, driver, t, solution.y.try_at(t)?, s)?;
    Ok(solution
        .y
        .try_at(s)?
        .iter()
        .zip(restart.value_at(s))
        .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::BuiltinDriver;
    use crate::lattice::Layout;

    #[test]
    fn zero_driver_gives_brownian_martingale() {
        let m = LatticeModel::with(1.0, 6, Layout::Node).unwrap();
        let b = m.claim_of_terminal(|x| x);
        let sol = solve_bsde(&m, &BuiltinDriver::Zero, &b).unwrap();
        for k in 0..=6 {
            for s in 0..m.state_count(k) {
                assert!((sol.y().get(k, s) - m.brownian(k, s)).abs() < 1e-14);
            }
        }
        assert!(sol
            .z()
            .rows()
            .all(|(_, r)| r.iter().all(|z| (z - 1.0).abs() < 1e-14)));
        assert_eq!(sol.picard_iterations_max(), 0);
    }

    #[test]
    fn ambiguous_discount_matches_scalar_recursion() {
        let m = LatticeModel::with(1.0, 4, Layout::Node).unwrap();
        let d = BuiltinDriver::linear_ambiguous(0.05, 0.1);
        let sol = risk_measure(&m, &d, &TerminalClaim::constant(&m, -1.0)).unwrap();
        let mut oracle = 1.0;
        for _ in 0..4 {
            oracle /= 1.0 + 0.05 * 0.25;
        }
        assert!((sol.root() - oracle).abs() < 1e-12);
        assert!((sol.root() - 0.951524).abs() < 1e-6);
    }

    #[test]
    fn entropic_two_step_hand_value() {
        let m = LatticeModel::with(1.0, 2, Layout::Node).unwrap();
        let e = BuiltinDriver::entropic(1.0).unwrap();
        let sol = solve_bsde(&m, &e, &m.claim_of_terminal(|x| x)).unwrap();
        assert!((sol.root() - 0.5).abs() < 1e-12);
        assert!(sol
            .z()
            .rows()
            .all(|(_, r)| r.iter().all(|z| (z - 1.0).abs() < 1e-14)));
    }

    #[test]
    fn normalization() {
        let m = LatticeModel::with(1.0, 5, Layout::Path).unwrap();
        for d in [
            BuiltinDriver::Zero,
            BuiltinDriver::linear_ambiguous(0.05, 0.1),
            BuiltinDriver::entropic(0.7).unwrap(),
            BuiltinDriver::cserm(0.2, 1.5).unwrap(),
        ] {
            let sol = risk_measure(&m, &d, &TerminalClaim::zero(&m)).unwrap();
            assert!(sol.y().rows().all(|(_, r)| r.iter().all(|v| *v == 0.0)));
        }
    }

    #[test]
    fn contraction_guard() {
        let m = LatticeModel::with(1.0, 2, Layout::Node).unwrap();
        let d = BuiltinDriver::linear_ambiguous(0.0, 2.0);
        assert!(matches!(
            risk_measure(&m, &d, &TerminalClaim::zero(&m)),
            Err(Error::StepSize { .. })
        ));
    }

    #[test]
    fn flow_gaps() {
        let m = LatticeModel::with(1.0, 4, Layout::Path).unwrap();
        let x = m
            .claim_of_path(|p| p.running_max() - p.terminal().powi(2))
            .unwrap();
        for d in [
            BuiltinDriver::Zero,
            BuiltinDriver::entropic(1.3).unwrap(),
            BuiltinDriver::linear_ambiguous(0.05, 0.2),
        ] {
            let sol = risk_measure(&m, &d, &x).unwrap();
            for (s, t) in [(0, 2), (1, 4), (3, 3), (0, 4)] {
                assert!(flow_consistency_check(&m, &d, &sol, s, t).unwrap() <= 1e-10);
            }
        }
    }

    #[test]
    fn layouts_agree_on_markov_claims() {
        let node = LatticeModel::with(1.0, 8, Layout::Node).unwrap();
        let path = LatticeModel::with(1.0, 8, Layout::Path).unwrap();
        let d = BuiltinDriver::cserm(0.1, 0.8).unwrap();
        let f = |x: f64| (x - 0.2).max(0.0) - 0.3 * x.sin();
        let a = risk_measure(&node, &d, &node.claim_of_terminal(f)).unwrap();
        let b = risk_measure(&path, &d, &path.claim_of_terminal(f)).unwrap();
        assert!((a.root() - b.root()).abs() < 1e-12);
    }

    #[test]
    fn non_convergence_reported() {
        // Lipschitz constant understated so the contraction guard passes.
        let d = crate::drivers::CustomDriver::new(
            "steep",
            crate::drivers::DriverFlags {
                depends_on_y: true,
                ..Default::default()
            },
            crate::drivers::Lipschitz { y: 0.0, z: 0.0 },
            |_, y, _| -4.0 * y,
        );
        let m = LatticeModel::with(1.0, 2, Layout::Node).unwrap();
        assert!(matches!(
            solve_bsde(&m, &d, &TerminalClaim::constant(&m, 1.0)),
            Err(Error::NonConvergence { step: 1, .. })
        ));
    }
}
