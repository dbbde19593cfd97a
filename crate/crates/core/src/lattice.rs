//! Binomial Brownian lattice: time grid, state layouts, conditional
//! expectations, martingale components, measure tilts and pathwise densities.
//!
//! Two layouts are supported. The node layout recombines paths with equal
//! up-counts, so step `k` has `k + 1` states indexed by the number of up-moves.
//! The path layout keeps every history: the state at step `k` is the integer
//! whose bit `m` records whether increment `m` went up, so step `k` has `2^k`
//! states and a terminal path `p` passes through state `p mod 2^k` at step `k`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest step count accepted in the path layout.
pub const MAX_PATH_STEPS: usize = 20;

/// Slack allowed on the tilt bound `|theta| sqrt(delta) <= 1`.
const TILT_SLACK: f64 = 1e-12;

/// State count from which per-step work is spread across threads.
pub(crate) const PARALLEL_THRESHOLD: usize = 1 << 12;

/// Uniform partition `t_k = k delta` of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    delta: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::Config("number of steps must be at least 1".into()));
        }
        Ok(Self {
            horizon,
            steps,
            delta: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `t_k`; the last point is the horizon itself, not `N * delta`.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            k as f64 * self.delta
        }
    }
}

/// Builds the uniform grid with `steps` intervals on `[0, horizon]`.
pub fn build_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

/// State layout of a [`LatticeModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Node,
    Path,
}

/// Discrete Brownian motion with increments `+-sqrt(delta)` on a time grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeModel {
    grid: TimeGrid,
    layout: Layout,
    sqrt_delta: f64,
}

impl LatticeModel {
    pub fn new(grid: TimeGrid, layout: Layout) -> Result<Self> {
        if layout == Layout::Path && grid.steps() > MAX_PATH_STEPS {
            return Err(Error::Config(format!(
                "path layout supports at most {MAX_PATH_STEPS} steps, got {}",
                grid.steps()
            )));
        }
        Ok(Self {
            grid,
            layout,
            sqrt_delta: grid.delta().sqrt(),
        })
    }

    /// Shorthand for `LatticeModel::new(build_grid(horizon, steps)?, layout)`.
    pub fn with(horizon: f64, steps: usize, layout: Layout) -> Result<Self> {
        Self::new(TimeGrid::new(horizon, steps)?, layout)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn delta(&self) -> f64 {
        self.grid.delta()
    }

    pub fn sqrt_delta(&self) -> f64 {
        self.sqrt_delta
    }

    pub fn require_path(&self, what: &str) -> Result<()> {
        match self.layout {
            Layout::Path => Ok(()),
            Layout::Node => Err(Error::Layout(format!("{what} requires the path layout"))),
        }
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k > self.steps() {
            return Err(Error::Index(format!(
                "step {k} beyond horizon step {}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Number of states observable at step `k`.
    pub fn state_count(&self, k: usize) -> usize {
        match self.layout {
            Layout::Node => k + 1,
            Layout::Path => 1 << k,
        }
    }

    pub fn terminal_count(&self) -> usize {
        self.state_count(self.steps())
    }

    /// Successor of step-`k` state `s` after a down-move.
    pub fn down_child(&self, _k: usize, s: usize) -> usize {
        s
    }

    /// Successor of step-`k` state `s` after an up-move.
    pub fn up_child(&self, k: usize, s: usize) -> usize {
        match self.layout {
            Layout::Node => s + 1,
            Layout::Path => s + (1 << k),
        }
    }

    /// Number of up-moves among the first `k` increments.
    pub fn up_moves(&self, _k: usize, s: usize) -> usize {
        match self.layout {
            Layout::Node => s,
            Layout::Path => s.count_ones() as usize,
        }
    }

    /// Brownian value `B_{t_k}` at step-`k` state `s`.
    pub fn brownian(&self, k: usize, s: usize) -> f64 {
        (2.0 * self.up_moves(k, s) as f64 - k as f64) * self.sqrt_delta
    }

    /// Step-`k` ancestor of a terminal path (path layout).
    pub fn ancestor(&self, k: usize, path: usize) -> usize {
        path & ((1usize << k) - 1)
    }

    /// `B_{t_k}` as an adapted field on steps `0..=N`.
    pub fn brownian_field(&self) -> AdaptedField {
        AdaptedField::from_fn(self, 0, self.steps(), |k, s| self.brownian(k, s))
    }

    /// Claim that is a function of the terminal Brownian value.
    pub fn claim_of_terminal(&self, f: impl Fn(f64) -> f64) -> TerminalClaim {
        let n = self.steps();
        TerminalClaim::new(
            (0..self.terminal_count())
                .map(|s| f(self.brownian(n, s)))
                .collect(),
        )
    }

    /// Claim that is a function of the whole Brownian path (path layout).
    pub fn claim_of_path(&self, f: impl Fn(&PathView) -> f64) -> Result<TerminalClaim> {
        self.require_path("a path-dependent claim")?;
        Ok(TerminalClaim::new(
            (0..self.terminal_count())
                .map(|p| f(&PathView::new(self, p)))
                .collect(),
        ))
    }

    /// Lifts step-`k` values to a terminal claim constant along each history.
    pub fn lift_to_terminal(&self, k: usize, values: &[f64]) -> Result<TerminalClaim> {
        self.check_step(k)?;
        check_len(self.state_count(k), values.len())?;
        let n = self.steps();
        match self.layout {
            Layout::Path => Ok(TerminalClaim::new(
                (0..self.terminal_count())
                    .map(|p| values[self.ancestor(k, p)])
                    .collect(),
            )),
            Layout::Node => {
                if k == n {
                    return Ok(TerminalClaim::new(values.to_vec()));
                }
                if values.iter().all(|v| *v == values[0]) {
                    return Ok(TerminalClaim::new(vec![values[0]; n + 1]));
                }
                Err(Error::Layout(
                    "lifting a state-dependent field to maturity requires the path layout".into(),
                ))
            }
        }
    }
}

/// Read-only view of one terminal path in the path layout.
#[derive(Debug, Clone, Copy)]
pub struct PathView {
    bits: usize,
    steps: usize,
    sqrt_delta: f64,
}

impl PathView {
    fn new(model: &LatticeModel, bits: usize) -> Self {
        Self {
            bits,
            steps: model.steps(),
            sqrt_delta: model.sqrt_delta(),
        }
    }

    pub fn index(&self) -> usize {
        self.bits
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Whether increment `k` (from `t_k` to `t_{k+1}`) is an up-move.
    pub fn up(&self, k: usize) -> bool {
        (self.bits >> k) & 1 == 1
    }

    /// `B_{t_k}` along this path.
    pub fn brownian(&self, k: usize) -> f64 {
        let ups = (self.bits & ((1usize << k) - 1)).count_ones() as f64;
        (2.0 * ups - k as f64) * self.sqrt_delta
    }

    pub fn terminal(&self) -> f64 {
        self.brownian(self.steps)
    }

    /// Average of `B_{t_1}, ..., B_{t_N}`.
    pub fn running_mean(&self) -> f64 {
        (1..=self.steps).map(|k| self.brownian(k)).sum::<f64>() / self.steps as f64
    }

    pub fn running_max(&self) -> f64 {
        (0..=self.steps)
            .map(|k| self.brownian(k))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Scalar process indexed by step and state, stored on a contiguous step range.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    first_step: usize,
    values: Vec<Vec<f64>>,
}

impl AdaptedField {
    /// Field whose entry `j` holds the values at step `first_step + j`.
    pub fn new(first_step: usize, values: Vec<Vec<f64>>) -> Self {
        Self { first_step, values }
    }

    /// Field on steps `first..=last` with value `f(k, s)`.
    pub fn from_fn(
        model: &LatticeModel,
        first: usize,
        last: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Self {
        let values = (first..=last)
            .map(|k| (0..model.state_count(k)).map(|s| f(k, s)).collect())
            .collect();
        Self::new(first, values)
    }

    /// Field on steps `first..=last` that is constant in the state at each step.
    pub fn deterministic(
        model: &LatticeModel,
        first: usize,
        last: usize,
        f: impl Fn(usize) -> f64,
    ) -> Self {
        Self::from_fn(model, first, last, |k, _| f(k))
    }

    pub fn first_step(&self) -> usize {
        self.first_step
    }

    /// Last stored step; equals `first_step - 1` conceptually when empty, so callers
    /// should test [`AdaptedField::is_empty`] first.
    pub fn last_step(&self) -> usize {
        (self.first_step + self.values.len()).saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn covers(&self, k: usize) -> bool {
        k >= self.first_step && k - self.first_step < self.values.len()
    }

    /// Values at step `k`; panics outside the stored range.
    pub fn at(&self, k: usize) -> &[f64] {
        assert!(
            self.covers(k),
            "step {k} outside stored range {}..={}",
            self.first_step,
            self.last_step()
        );
        &self.values[k - self.first_step]
    }

    pub fn try_at(&self, k: usize) -> Result<&[f64]> {
        if self.covers(k) {
            Ok(&self.values[k - self.first_step])
        } else {
            Err(Error::Index(format!(
                "step {k} outside stored range {}..={}",
                self.first_step,
                self.last_step()
            )))
        }
    }

    pub fn get(&self, k: usize, s: usize) -> f64 {
        self.at(k)[s]
    }

    /// Steps and value rows in ascending step order.
    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.values
            .iter()
            .enumerate()
            .map(move |(j, v)| (self.first_step + j, v.as_slice()))
    }

    /// Pointwise combination of two fields over their common step range.
    pub fn zip_with(&self, other: &AdaptedField, f: impl Fn(f64, f64) -> f64) -> AdaptedField {
        let first = self.first_step.max(other.first_step);
        let last = self.last_step().min(other.last_step());
        let values = (first..=last)
            .map(|k| {
                self.at(k)
                    .iter()
                    .zip(other.at(k))
                    .map(|(a, b)| f(*a, *b))
                    .collect()
            })
            .collect();
        AdaptedField::new(first, values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> AdaptedField {
        AdaptedField::new(
            self.first_step,
            self.values
                .iter()
                .map(|row| row.iter().map(|v| f(*v)).collect())
                .collect(),
        )
    }

    /// Largest absolute pointwise difference over the common step range.
    pub fn max_abs_diff(&self, other: &AdaptedField) -> f64 {
        self.zip_with(other, |a, b| (a - b).abs())
            .values
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(*v))
    }

    /// Whether every step holds a single value for all of its states.
    pub fn is_state_independent(&self) -> bool {
        self.values
            .iter()
            .all(|row| row.iter().all(|v| *v == row[0]))
    }

    /// Checks the state counts against `model` on every stored step.
    pub fn check_shape(&self, model: &LatticeModel) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("adapted field stores no steps".into()));
        }
        if self.last_step() > model.steps() {
            return Err(Error::Index(format!(
                "field reaches step {} beyond horizon step {}",
                self.last_step(),
                model.steps()
            )));
        }
        for (k, row) in self.rows() {
            check_len(model.state_count(k), row.len())?;
        }
        Ok(())
    }
}

/// Maturity payoff per terminal state (node layout) or per path (path layout).
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalClaim {
    values: Vec<f64>,
}

impl TerminalClaim {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn constant(model: &LatticeModel, c: f64) -> Self {
        Self::new(vec![c; model.terminal_count()])
    }

    pub fn zero(model: &LatticeModel) -> Self {
        Self::constant(model, 0.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `M = max |X|`.
    pub fn bound(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> TerminalClaim {
        TerminalClaim::new(self.values.iter().map(|v| f(*v)).collect())
    }

    pub fn zip_with(&self, other: &TerminalClaim, f: impl Fn(f64, f64) -> f64) -> TerminalClaim {
        assert_eq!(self.len(), other.len(), "claims on different lattices");
        TerminalClaim::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        )
    }

    pub fn scaled(&self, a: f64) -> TerminalClaim {
        self.map(|v| a * v)
    }

    pub fn check_shape(&self, model: &LatticeModel) -> Result<()> {
        check_len(model.terminal_count(), self.len())?;
        if !self.is_finite() {
            return Err(Error::Config("terminal claim has non-finite values".into()));
        }
        Ok(())
    }
}

impl std::ops::Neg for &TerminalClaim {
    type Output = TerminalClaim;
    fn neg(self) -> TerminalClaim {
        self.map(|v| -v)
    }
}

impl std::ops::Add for &TerminalClaim {
    type Output = TerminalClaim;
    fn add(self, rhs: &TerminalClaim) -> TerminalClaim {
        self.zip_with(rhs, |a, b| a + b)
    }
}

impl std::ops::Sub for &TerminalClaim {
    type Output = TerminalClaim;
    fn sub(self, rhs: &TerminalClaim) -> TerminalClaim {
        self.zip_with(rhs, |a, b| a - b)
    }
}

/// Discrete Girsanov change: per-step up-probabilities `(1 - theta sqrt(delta)) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureTilt {
    p_up: AdaptedField,
}

impl MeasureTilt {
    /// Up-probabilities on the steps covered by the generating drift.
    pub fn p_up(&self) -> &AdaptedField {
        &self.p_up
    }

    fn probability(&self, k: usize, s: usize) -> Result<f64> {
        Ok(self.p_up.try_at(k)?[s])
    }
}

/// Converts a drift field into per-step up-probabilities.
///
/// Rejects `|theta| sqrt(delta) > 1`; the boundary value gives a one-sided step.
pub fn tilt_probabilities(model: &LatticeModel, theta: &AdaptedField) -> Result<MeasureTilt> {
    theta.check_shape(model)?;
    let sd = model.sqrt_delta();
    let mut rows = Vec::with_capacity(theta.values.len());
    for (k, row) in theta.rows() {
        let mut out = Vec::with_capacity(row.len());
        for (s, th) in row.iter().enumerate() {
            let magnitude = th.abs() * sd;
            if magnitude.is_nan() || magnitude > 1.0 + TILT_SLACK {
                return Err(Error::Tilt {
                    step: k,
                    state: s,
                    magnitude,
                });
            }
            out.push((0.5 * (1.0 - th * sd)).clamp(0.0, 1.0));
        }
        rows.push(out);
    }
    Ok(MeasureTilt {
        p_up: AdaptedField::new(theta.first_step(), rows),
    })
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape { expected, actual })
    }
}

/// `E[V_{k+1} | F_k]` under the base measure or under `tilt`.
pub fn conditional_expectation(
    model: &LatticeModel,
    next: &[f64],
    k: usize,
    tilt: Option<&MeasureTilt>,
) -> Result<Vec<f64>> {
    if k >= model.steps() {
        return Err(Error::Index(format!(
            "no step after {k} on a {}-step lattice",
            model.steps()
        )));
    }
    check_len(model.state_count(k + 1), next.len())?;
    let one = |s: usize| -> Result<f64> {
        let up = next[model.up_child(k, s)];
        let down = next[model.down_child(k, s)];
        match tilt {
            None => Ok(0.5 * (up + down)),
            Some(t) => {
                let p = t.probability(k, s)?;
                Ok(p * up + (1.0 - p) * down)
            }
        }
    };
    let n = model.state_count(k);
    if n >= PARALLEL_THRESHOLD {
        (0..n).into_par_iter().map(one).collect()
    } else {
        (0..n).map(one).collect()
    }
}

/// `E[V_{k+1} xi_k | F_k] / delta = (V_up - V_down) / (2 sqrt(delta))`.
pub fn martingale_component(model: &LatticeModel, next: &[f64], k: usize) -> Result<Vec<f64>> {
    if k >= model.steps() {
        return Err(Error::Index(format!(
            "no step after {k} on a {}-step lattice",
            model.steps()
        )));
    }
    check_len(model.state_count(k + 1), next.len())?;
    let scale = 0.5 / model.sqrt_delta();
    Ok((0..model.state_count(k))
        .map(|s| (next[model.up_child(k, s)] - next[model.down_child(k, s)]) * scale)
        .collect())
}

/// `E[V_k | F_t]` by repeated one-step expectations from step `k` down to `t`.
pub fn expectation_between(
    model: &LatticeModel,
    values: &[f64],
    k: usize,
    t: usize,
    tilt: Option<&MeasureTilt>,
) -> Result<Vec<f64>> {
    if t > k {
        return Err(Error::Index(format!("start step {t} after end step {k}")));
    }
    check_len(model.state_count(k), values.len())?;
    let mut cur = values.to_vec();
    for m in (t..k).rev() {
        cur = conditional_expectation(model, &cur, m, tilt)?;
    }
    Ok(cur)
}

/// Per-path likelihood ratio `prod_{k >= from_step} (2p_k or 2(1 - p_k))`.
pub fn pathwise_density(
    model: &LatticeModel,
    tilt: &MeasureTilt,
    from_step: usize,
) -> Result<Vec<f64>> {
    model.require_path("pathwise densities")?;
    model.check_step(from_step)?;
    let n = model.steps();
    if from_step < n && (!tilt.p_up.covers(from_step) || !tilt.p_up.covers(n - 1)) {
        return Err(Error::Index(format!(
            "tilt covers steps {}..={}, density needs {from_step}..={}",
            tilt.p_up.first_step(),
            tilt.p_up.last_step(),
            n - 1
        )));
    }
    let one = |p: usize| {
        let mut d = 1.0;
        for k in from_step..n {
            let q = tilt.p_up.get(k, model.ancestor(k, p));
            d *= if (p >> k) & 1 == 1 {
                2.0 * q
            } else {
                2.0 * (1.0 - q)
            };
        }
        d
    };
    let count = model.terminal_count();
    Ok(if count >= PARALLEL_THRESHOLD {
        (0..count).into_par_iter().map(one).collect()
    } else {
        (0..count).map(one).collect()
    })
}

/// Base-measure `E[V_N | F_t]` of per-path values by averaging each step-`t` subtree.
pub fn average_over_subtrees(model: &LatticeModel, values: &[f64], t: usize) -> Result<Vec<f64>> {
    model.require_path("pathwise averaging")?;
    model.check_step(t)?;
    check_len(model.terminal_count(), values.len())?;
    let width = 1usize << t;
    let fan = model.terminal_count() / width;
    let mut sums = vec![0.0; width];
    // Ascending path order keeps the reduction deterministic.
    for (p, v) in values.iter().enumerate() {
        sums[p & (width - 1)] += v;
    }
    Ok(sums.into_iter().map(|s| s / fan as f64).collect())
}

/// `delta * sum_{m=i}^{k-1} field_m` along each history, as values at step `k`.
pub fn left_riemann_integral(
    model: &LatticeModel,
    field: &AdaptedField,
    i: usize,
    k: usize,
) -> Result<Vec<f64>> {
    if i > k {
        return Err(Error::Index(format!(
            "integral from step {i} to earlier step {k}"
        )));
    }
    model.check_step(k)?;
    if i < k && (!field.covers(i) || !field.covers(k - 1)) {
        return Err(Error::Index(format!(
            "field covers steps {}..={}, integral needs {i}..={}",
            field.first_step(),
            field.last_step(),
            k - 1
        )));
    }
    let delta = model.delta();
    match model.layout() {
        Layout::Path => Ok((0..model.state_count(k))
            .map(|s| {
                (i..k)
                    .map(|m| field.get(m, model.ancestor(m, s)))
                    .sum::<f64>()
                    * delta
            })
            .collect()),
        Layout::Node => {
            let mut total = 0.0;
            for m in i..k {
                let row = field.at(m);
                if row.iter().any(|v| *v != row[0]) {
                    return Err(Error::Layout(
                        "integrals of state-dependent fields require the path layout".into(),
                    ));
                }
                total += row[0];
            }
            Ok(vec![total * delta; model.state_count(k)])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(t: f64, n: usize, layout: Layout) -> LatticeModel {
        LatticeModel::with(t, n, layout).unwrap()
    }

    #[test]
    fn grid_spacing_and_times() {
        assert_eq!(build_grid(1.0, 4).unwrap().delta(), 0.25);
        let g = build_grid(1.0, 1).unwrap();
        assert_eq!((g.time(0), g.time(1)), (0.0, 1.0));
        assert_eq!(build_grid(2.0, 8).unwrap().time(3), 0.75);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(matches!(build_grid(0.0, 4), Err(Error::Config(_))));
        assert!(matches!(build_grid(-1.0, 4), Err(Error::Config(_))));
        assert!(matches!(build_grid(1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn path_layout_capped() {
        assert!(LatticeModel::with(1.0, 20, Layout::Path).is_ok());
        assert!(matches!(
            LatticeModel::with(1.0, 21, Layout::Path),
            Err(Error::Config(_))
        ));
        assert!(LatticeModel::with(1.0, 1000, Layout::Node).is_ok());
    }

    #[test]
    fn mean_of_two_children() {
        let m = model(1.0, 1, Layout::Node);
        assert_eq!(
            conditional_expectation(&m, &[1.0, 3.0], 0, None).unwrap(),
            vec![2.0]
        );
    }

    #[test]
    fn tilted_one_step_expectation() {
        let m = model(0.25, 1, Layout::Node);
        let tilt = tilt_probabilities(&m, &AdaptedField::new(0, vec![vec![0.2]])).unwrap();
        assert!((tilt.p_up().get(0, 0) - 0.45).abs() < 1e-15);
        // Node layout: index 0 is the down child, index 1 the up child.
        let e = conditional_expectation(&m, &[0.0, 1.0], 0, Some(&tilt)).unwrap();
        assert!((e[0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn brownian_is_a_martingale_with_unit_z() {
        for layout in [Layout::Node, Layout::Path] {
            let m = model(1.0, 5, layout);
            let b = m.brownian_field();
            for k in 0..5 {
                let e = conditional_expectation(&m, b.at(k + 1), k, None).unwrap();
                let z = martingale_component(&m, b.at(k + 1), k).unwrap();
                for s in 0..m.state_count(k) {
                    assert!((e[s] - b.get(k, s)).abs() < 1e-15);
                    assert!((z[s] - 1.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn constants_have_no_martingale_part() {
        let m = model(1.0, 3, Layout::Node);
        assert_eq!(
            martingale_component(&m, &[2.5; 4], 2).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn squared_brownian_at_origin_has_zero_z() {
        let m = model(0.5, 2, Layout::Node);
        let sq: Vec<f64> = (0..2).map(|s| m.brownian(1, s).powi(2)).collect();
        assert_eq!(martingale_component(&m, &sq, 0).unwrap(), vec![0.0]);
    }

    #[test]
    fn tilt_bound_enforced() {
        let m = model(1.0, 4, Layout::Node);
        let ok = tilt_probabilities(&m, &AdaptedField::deterministic(&m, 0, 3, |_| 0.0)).unwrap();
        assert!(ok.p_up().rows().all(|(_, r)| r.iter().all(|p| *p == 0.5)));
        let bad = AdaptedField::from_fn(&m, 0, 3, |k, s| if k == 2 && s == 1 { 4.0 } else { 0.0 });
        assert_eq!(
            tilt_probabilities(&m, &bad),
            Err(Error::Tilt {
                step: 2,
                state: 1,
                magnitude: 2.0
            })
        );
    }

    #[test]
    fn boundary_tilt_is_one_sided() {
        let m = model(1.0, 1, Layout::Path);
        let tilt = tilt_probabilities(&m, &AdaptedField::new(0, vec![vec![-1.0]])).unwrap();
        assert_eq!(pathwise_density(&m, &tilt, 0).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn one_step_densities() {
        let m = model(0.25, 1, Layout::Path);
        let tilt = tilt_probabilities(&m, &AdaptedField::new(0, vec![vec![0.2]])).unwrap();
        let d = pathwise_density(&m, &tilt, 0).unwrap();
        // Path 0 is the down path, path 1 the up path.
        assert!((d[1] - 0.9).abs() < 1e-15);
        assert!((d[0] - 1.1).abs() < 1e-15);
        assert!((0.5 * (d[0] + d[1]) - 1.0).abs() < 1e-15);
        assert_eq!(pathwise_density(&m, &tilt, 1).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn densities_rejected_on_nodes() {
        let m = model(1.0, 2, Layout::Node);
        let tilt = tilt_probabilities(&m, &AdaptedField::deterministic(&m, 0, 1, |_| 0.1)).unwrap();
        assert!(matches!(
            pathwise_density(&m, &tilt, 0),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn riemann_sums() {
        let m = model(1.0, 2, Layout::Path);
        let f = AdaptedField::deterministic(&m, 0, 1, |k| [0.1, 0.3][k]);
        let v = left_riemann_integral(&m, &f, 0, 2).unwrap();
        assert!(v.iter().all(|x| (x - 0.2).abs() < 1e-15));
        assert_eq!(left_riemann_integral(&m, &f, 1, 1).unwrap(), vec![0.0; 2]);
        assert!(matches!(
            left_riemann_integral(&m, &f, 2, 1),
            Err(Error::Index(_))
        ));
        let n = model(2.0, 4, Layout::Node);
        let c = AdaptedField::deterministic(&n, 0, 4, |_| 0.7);
        let v = left_riemann_integral(&n, &c, 0, 4).unwrap();
        assert!(v.iter().all(|x| (x - 1.4).abs() < 1e-15));
    }

    #[test]
    fn path_integral_follows_history() {
        let m = model(1.0, 2, Layout::Path);
        let v = left_riemann_integral(&m, &m.brownian_field(), 0, 2).unwrap();
        // Only B_{t_1} contributes: +-0.5*sqrt(0.5) by the first increment.
        let b1 = 0.5f64.sqrt();
        assert!((v[1] - 0.5 * b1).abs() < 1e-15);
        assert!((v[0] + 0.5 * b1).abs() < 1e-15);
    }

    #[test]
    fn subtree_average_matches_backward_expectation() {
        let m = model(1.0, 4, Layout::Path);
        let x = m
            .claim_of_path(|p| p.running_max() + p.terminal().powi(3))
            .unwrap();
        for t in 0..=4 {
            let a = average_over_subtrees(&m, x.values(), t).unwrap();
            let b = expectation_between(&m, x.values(), 4, t, None).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn lifting_rules() {
        let m = model(1.0, 3, Layout::Path);
        let lifted = m.lift_to_terminal(1, &[5.0, 7.0]).unwrap();
        assert_eq!(lifted.values(), &[5.0, 7.0, 5.0, 7.0, 5.0, 7.0, 5.0, 7.0]);
        let n = model(1.0, 3, Layout::Node);
        assert!(n.lift_to_terminal(1, &[2.0, 2.0]).is_ok());
        assert!(matches!(
            n.lift_to_terminal(1, &[1.0, 2.0]),
            Err(Error::Layout(_))
        ));
    }
}
