//! Backward Volterra equations solved as a family of anchor-indexed BSDEs.
//!
//! For each anchor `i` the BSDE `eta_k = E[eta_{k+1} | F_k] + h(i, k, zeta_k) delta`
//! with terminal `phi(t_i)` is solved on steps `i..=N`; the solution is
//! `Y(i) = eta_i(i)` and `Z(i, k) = zeta_k(i)`.

use rayon::prelude::*;

use crate::bsde::{induct, BsdeSolution};
use crate::drivers::{Driver, StateRef};
use crate::error::{Error, Result};
use crate::lattice::{AdaptedField, LatticeModel, TerminalClaim};

/// Anchor-dependent generator `h(i, k, z)`, evaluated for steps `k >= i`.
pub trait VolterraDriver: Sync {
    fn evaluate(&self, anchor: usize, at: StateRef, z: f64) -> f64;
}

/// Volterra driver given by a closure `(anchor, state, z) -> value`.
pub struct FnVolterra<F>(pub F);

impl<F> VolterraDriver for FnVolterra<F>
where
    F: Fn(usize, StateRef, f64) -> f64 + Sync,
{
    fn evaluate(&self, anchor: usize, at: StateRef, z: f64) -> f64 {
        (self.0)(anchor, at, z)
    }
}

/// The same BSDE driver at every anchor; drivers depending on `y` are rejected.
pub struct AnchorInvariant<'a> {
    driver: &'a dyn Driver,
}

impl<'a> AnchorInvariant<'a> {
    pub fn new(driver: &'a dyn Driver) -> Result<Self> {
        if driver.flags().depends_on_y {
            return Err(Error::Config(format!(
                "Volterra drivers may not depend on y, but {} does",
                driver.name()
            )));
        }
        Ok(Self { driver })
    }
}

impl VolterraDriver for AnchorInvariant<'_> {
    fn evaluate(&self, _anchor: usize, at: StateRef, z: f64) -> f64 {
        self.driver.evaluate(at, 0.0, z)
    }
}

/// Terminal claims `phi(t_i)` indexed by anchor.
pub trait TerminalFamily: Sync {
    fn terminal(&self, anchor: usize) -> Result<TerminalClaim>;
}

/// One claim shared by every anchor.
pub struct SameTerminal(pub TerminalClaim);

impl TerminalFamily for SameTerminal {
    fn terminal(&self, _anchor: usize) -> Result<TerminalClaim> {
        Ok(self.0.clone())
    }
}

impl TerminalFamily for Vec<TerminalClaim> {
    fn terminal(&self, anchor: usize) -> Result<TerminalClaim> {
        self.get(anchor)
            .cloned()
            .ok_or_else(|| Error::Index(format!("terminal family has no anchor {anchor}")))
    }
}

/// Terminal family given by a closure.
pub struct FamilyFn<F>(pub F);

impl<F> TerminalFamily for FamilyFn<F>
where
    F: Fn(usize) -> Result<TerminalClaim> + Sync,
{
    fn terminal(&self, anchor: usize) -> Result<TerminalClaim> {
        (self.0)(anchor)
    }
}

/// What to keep from the per-anchor solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Retention {
    #[default]
    Full,
    DiagonalOnly,
}

/// Order in which anchors are dispatched; results are placed by anchor index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum AnchorOrder {
    #[default]
    Ascending,
    Descending,
    Custom(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BsvieOptions {
    pub retention: Retention,
    pub order: AnchorOrder,
}

/// Diagonal `Y(i)` on every anchor plus, optionally, each anchor's BSDE solution.
#[derive(Debug, Clone, PartialEq)]
pub struct BsvieSolution {
    diagonal: AdaptedField,
    anchors: Option<Vec<BsdeSolution>>,
}

impl BsvieSolution {
    /// `i -> Y(i)` as values at step `i`.
    pub fn diagonal(&self) -> &AdaptedField {
        &self.diagonal
    }

    /// Number of anchors, `N + 1`.
    pub fn anchor_count(&self) -> usize {
        self.diagonal.rows().count()
    }

    /// Retained solution `(eta(i), zeta(i))` of anchor `i`.
    pub fn anchor(&self, i: usize) -> Option<&BsdeSolution> {
        self.anchors.as_ref().and_then(|a| a.get(i))
    }

    /// `Z(i, k)` for `k >= i`, when retained.
    pub fn z(&self, i: usize, k: usize) -> Option<&[f64]> {
        let a = self.anchor(i)?;
        a.z().covers(k).then(|| a.z().at(k))
    }
}

/// Diagonal process of a solved Volterra equation.
pub fn diagonal(solution: &BsvieSolution) -> AdaptedField {
    solution.diagonal.clone()
}

/// Solves every anchor independently with default options.
pub fn solve_bsvie(
    model: &LatticeModel,
    driver: &dyn VolterraDriver,
    family: &dyn TerminalFamily,
) -> Result<BsvieSolution> {
    solve_bsvie_with(model, driver, family, &BsvieOptions::default())
}

pub fn solve_bsvie_with(
    model: &LatticeModel,
    driver: &dyn VolterraDriver,
    family: &dyn TerminalFamily,
    options: &BsvieOptions,
) -> Result<BsvieSolution> {
    let n = model.steps();
    let order: Vec<usize> = match &options.order {
        AnchorOrder::Ascending => (0..=n).collect(),
        AnchorOrder::Descending => (0..=n).rev().collect(),
        AnchorOrder::Custom(p) => {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            if sorted != (0..=n).collect::<Vec<_>>() {
                return Err(Error::Config(format!(
                    "anchor order must be a permutation of 0..={n}"
                )));
            }
            p.clone()
        }
    };
    let delta = model.delta();
    let solve_anchor = |i: usize| -> Result<(usize, BsdeSolution)> {
        let terminal = family.terminal(i).map_err(|e| e.at_anchor(i))?;
        terminal.check_shape(model).map_err(|e| e.at_anchor(i))?;
        induct(model, n, terminal.values().to_vec(), i, |at, e, z| {
            Ok((e + driver.evaluate(i, at, z) * delta, 0))
        })
        .map(|sol| (i, sol))
        .map_err(|e| e.at_anchor(i))
    };
    let mut solved: Vec<(usize, BsdeSolution)> = order
        .par_iter()
        .map(|&i| solve_anchor(i))
        .collect::<Result<_>>()?;
    solved.sort_by_key(|(i, _)| *i);
    let diagonal = AdaptedField::new(
        0,
        solved
            .iter()
            .map(|(i, s)| s.value_at(*i).to_vec())
            .collect(),
    );
    let anchors = match options.retention {
        Retention::Full => Some(solved.into_iter().map(|(_, s)| s).collect()),
        Retention::DiagonalOnly => None,
    };
    Ok(BsvieSolution { diagonal, anchors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve_bsde;
    use crate::drivers::BuiltinDriver;
    use crate::lattice::Layout;

    fn model(layout: Layout) -> LatticeModel {
        LatticeModel::with(1.0, 5, layout).unwrap()
    }

    #[test]
    fn zero_driver_diagonal_is_brownian() {
        for layout in [Layout::Node, Layout::Path] {
            let m = model(layout);
            let zero = FnVolterra(|_, _, _| 0.0);
            let sol = solve_bsvie(&m, &zero, &SameTerminal(m.claim_of_terminal(|x| x))).unwrap();
            assert_eq!(sol.anchor_count(), 6);
            for (k, row) in sol.diagonal().rows() {
                for (s, v) in row.iter().enumerate() {
                    assert!((v - m.brownian(k, s)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn deterministic_family() {
        let m = model(Layout::Node);
        let fam = FamilyFn(|i: usize| Ok(TerminalClaim::constant(&m, 1.0 - m.grid().time(i))));
        let sol = solve_bsvie(&m, &FnVolterra(|_, _, _| 0.0), &fam).unwrap();
        for (k, row) in sol.diagonal().rows() {
            assert!(row
                .iter()
                .all(|v| (v - (1.0 - m.grid().time(k))).abs() < 1e-15));
        }
    }

    #[test]
    fn anchor_scaled_linear_driver() {
        let m = model(Layout::Node);
        let c = |i: usize| 0.1 * (i as f64 + 1.0);
        let h = FnVolterra(move |i, _: StateRef, z: f64| -c(i) * z);
        let sol = solve_bsvie(&m, &h, &SameTerminal(m.claim_of_terminal(|x| x))).unwrap();
        for (i, row) in sol.diagonal().rows() {
            let horizon_left = 1.0 - m.grid().time(i);
            for (s, v) in row.iter().enumerate() {
                let oracle = m.brownian(i, s) - c(i) * horizon_left;
                assert!((v - oracle).abs() < 1e-13, "anchor {i}: {v} vs {oracle}");
            }
        }
    }

    #[test]
    fn embedding_of_plain_bsde() {
        let m = model(Layout::Path);
        let e = BuiltinDriver::entropic(0.9).unwrap();
        let xi = m
            .claim_of_path(|p| p.running_max() - 0.5 * p.terminal())
            .unwrap();
        let plain = solve_bsde(&m, &e, &xi).unwrap();
        let v = solve_bsvie(&m, &AnchorInvariant::new(&e).unwrap(), &SameTerminal(xi)).unwrap();
        for (k, row) in v.diagonal().rows() {
            assert_eq!(row, plain.value_at(k));
        }
    }

    #[test]
    fn anchor_order_is_irrelevant() {
        let m = model(Layout::Path);
        let h = FnVolterra(|i, at: StateRef, z: f64| {
            0.3 * z * z / (1.0 + i as f64) - 0.1 * (at.step as f64) * z
        });
        let fam = FamilyFn(|i: usize| {
            m.claim_of_path(|p| p.terminal() * (1.0 + 0.1 * i as f64) + p.running_mean())
        });
        let base = solve_bsvie(&m, &h, &fam).unwrap();
        for order in [
            AnchorOrder::Descending,
            AnchorOrder::Custom(vec![3, 0, 5, 1, 4, 2]),
        ] {
            let other = solve_bsvie_with(
                &m,
                &h,
                &fam,
                &BsvieOptions {
                    retention: Retention::Full,
                    order,
                },
            )
            .unwrap();
            assert_eq!(base, other);
        }
    }

    #[test]
    fn retention_and_triangle_access() {
        let m = model(Layout::Node);
        let fam = SameTerminal(m.claim_of_terminal(|x| x));
        let zero = FnVolterra(|_, _, _| 0.0);
        let full = solve_bsvie(&m, &zero, &fam).unwrap();
        assert!(full.z(2, 1).is_none());
        assert!(full
            .z(2, 4)
            .unwrap()
            .iter()
            .all(|z| (z - 1.0).abs() < 1e-14));
        let lean = solve_bsvie_with(
            &m,
            &zero,
            &fam,
            &BsvieOptions {
                retention: Retention::DiagonalOnly,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(lean.anchor(0).is_none());
        assert_eq!(diagonal(&lean), diagonal(&full));
    }

    #[test]
    fn rejects_y_dependence_and_tags_anchor_errors() {
        let la = BuiltinDriver::linear_ambiguous(0.0, 0.1);
        assert!(matches!(AnchorInvariant::new(&la), Err(Error::Config(_))));
        let m = model(Layout::Node);
        let fam = FamilyFn(|i: usize| {
            if i == 3 {
                Ok(TerminalClaim::new(vec![0.0; 2]))
            } else {
                Ok(TerminalClaim::zero(&m))
            }
        });
        let err = solve_bsvie(&m, &FnVolterra(|_, _, _| 0.0), &fam).unwrap_err();
        assert!(matches!(err, Error::Anchor { anchor: 3, .. }));
    }
}
