use proptest::prelude::*;

use csalloc::allocation::{alloc_marginal, Allocator, Rule, RuleParams, SignVariant};
use csalloc::bsde::{risk_measure, solve_bsde};
use csalloc::bsvie::{
    solve_bsvie, solve_bsvie_with, AnchorInvariant, AnchorOrder, BsvieOptions, SameTerminal,
};
use csalloc::drivers::{BuiltinDriver, Conjugate, Driver, StateRef};
use csalloc::lattice::{
    average_over_subtrees, conditional_expectation, expectation_between, martingale_component,
    pathwise_density, tilt_probabilities, AdaptedField, LatticeModel, Layout, TerminalClaim,
};
use csalloc::properties::{random_instance, sample_claims, DriverKind, InstanceSpec};
use csalloc::scenario::{discount_between, extract_scenario, penalty_field};

fn layout() -> impl Strategy<Value = Layout> {
    prop_oneof![Just(Layout::Node), Just(Layout::Path)]
}

fn kind() -> impl Strategy<Value = DriverKind> {
    prop::sample::select(DriverKind::ALL.to_vec())
}

fn values(model: &LatticeModel, k: usize, seed: u64) -> Vec<f64> {
    // Cheap deterministic pseudo-random row.
    (0..model.state_count(k))
        .map(|s| ((s as f64 + 1.0) * 12.9898 + seed as f64 * 78.233).sin() * 3.0)
        .collect()
}

fn random_theta(model: &LatticeModel, seed: u64) -> AdaptedField {
    let bound = 0.9 / model.sqrt_delta();
    AdaptedField::from_fn(model, 0, model.steps() - 1, |k, s| {
        bound * (((k * 31 + s) as f64 + seed as f64 * 0.37).sin())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tower_property(layout in layout(), n in 1usize..9, t in 0usize..9, seed in 0u64..1000, tilted in any::<bool>()) {
        let m = LatticeModel::with(1.0, n, layout).unwrap();
        let t = t.min(n);
        let tilt = tilt_probabilities(&m, &random_theta(&m, seed)).unwrap();
        let tilt = tilted.then_some(&tilt);
        let v = values(&m, n, seed);
        let direct = expectation_between(&m, &v, n, t, tilt).unwrap();
        let mid = (t + n) / 2;
        let inner = expectation_between(&m, &v, n, mid, tilt).unwrap();
        let nested = expectation_between(&m, &inner, mid, t, tilt).unwrap();
        for (a, b) in direct.iter().zip(&nested) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_step_reconstruction(layout in layout(), n in 1usize..9, k in 0usize..8, seed in 0u64..1000) {
        let m = LatticeModel::with(2.0, n, layout).unwrap();
        let k = k.min(n - 1);
        let next = values(&m, k + 1, seed);
        let e = conditional_expectation(&m, &next, k, None).unwrap();
        let z = martingale_component(&m, &next, k).unwrap();
        let sd = m.sqrt_delta();
        for s in 0..m.state_count(k) {
            prop_assert!((e[s] + z[s] * sd - next[m.up_child(k, s)]).abs() <= 1e-12);
            prop_assert!((e[s] - z[s] * sd - next[m.down_child(k, s)]).abs() <= 1e-12);
        }
    }

    #[test]
    fn tilted_increment_mean(layout in layout(), n in 1usize..9, seed in 0u64..1000) {
        let m = LatticeModel::with(1.0, n, layout).unwrap();
        let theta = random_theta(&m, seed);
        let tilt = tilt_probabilities(&m, &theta).unwrap();
        for k in 0..n {
            let b: Vec<f64> = (0..m.state_count(k + 1)).map(|s| m.brownian(k + 1, s)).collect();
            let e = conditional_expectation(&m, &b, k, Some(&tilt)).unwrap();
            for (s, es) in e.iter().enumerate() {
                let drift = es - m.brownian(k, s);
                prop_assert!((drift + theta.get(k, s) * m.delta()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn density_has_unit_conditional_mean(n in 1usize..10, from in 0usize..10, seed in 0u64..1000) {
        let m = LatticeModel::with(1.0, n, Layout::Path).unwrap();
        let from = from.min(n);
        let tilt = tilt_probabilities(&m, &random_theta(&m, seed)).unwrap();
        let l = pathwise_density(&m, &tilt, from).unwrap();
        prop_assert!(l.iter().all(|v| *v >= 0.0));
        for v in average_over_subtrees(&m, &l, from).unwrap() {
            prop_assert!((v - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn young_fenchel_with_attainment(kind in kind(), seed in 0u64..10_000, y in -2.0f64..2.0, z in -2.0f64..2.0, y1 in -2.0f64..2.0, z1 in -2.0f64..2.0) {
        let inst = random_instance(&InstanceSpec::new(seed, kind).with_steps(3)).unwrap();
        let d = &inst.driver;
        let at = StateRef::new((seed % 3) as usize, 0);
        let p = d.select_scenario(at, y, z).unwrap();
        let g = match d.conjugate(at, p.beta, p.mu).unwrap() {
            Conjugate::Finite(g) => g,
            Conjugate::Infinite => return Err(TestCaseError::fail("selected scenario has infinite conjugate")),
        };
        let pairing = |y: f64, z: f64| d.evaluate(at, y, z) + g + p.beta * y + p.mu * z;
        prop_assert!(pairing(y, z).abs() <= 1e-10);
        prop_assert!(pairing(y1, z1) >= -1e-10);
    }

    #[test]
    fn discounts_multiply_and_penalties_are_nonnegative(kind in kind(), seed in 0u64..10_000) {
        let inst = random_instance(&InstanceSpec::new(seed, kind)).unwrap();
        let (m, d) = (&inst.model, &inst.driver);
        let rho = risk_measure(m, d, &inst.y).unwrap();
        let sc = extract_scenario(m, d, &rho).unwrap();
        let n = m.steps();
        let (i, k) = (n / 3, 2 * n / 3);
        let whole = discount_between(m, &sc, i, n).unwrap();
        let head = m.lift_to_terminal(k, &discount_between(m, &sc, i, k).unwrap()).unwrap();
        let tail = discount_between(m, &sc, k, n).unwrap();
        for p in 0..m.terminal_count() {
            prop_assert!((whole[p] - head.values()[p] * tail[p]).abs() <= 1e-14);
            prop_assert!(whole[p] > 0.0 && whole[p] <= 1.0);
        }
        let pen = penalty_field(m, &sc, 0).unwrap();
        prop_assert!(pen.rows().all(|(_, r)| r.iter().all(|v| *v >= 0.0)));
    }

    #[test]
    fn bsvie_embeds_plain_bsde(kind in prop::sample::select(vec![DriverKind::Zero, DriverKind::Entropic]), seed in 0u64..10_000, descending in any::<bool>()) {
        let inst = random_instance(&InstanceSpec::new(seed, kind)).unwrap();
        let (m, d) = (&inst.model, &inst.driver);
        let plain = solve_bsde(m, d, &inst.x).unwrap();
        let v = AnchorInvariant::new(d).unwrap();
        let order = if descending { AnchorOrder::Descending } else { AnchorOrder::Ascending };
        let sol = solve_bsvie_with(m, &v, &SameTerminal(inst.x.clone()), &BsvieOptions { order, ..Default::default() }).unwrap();
        prop_assert_eq!(sol.diagonal(), plain.y());
        prop_assert_eq!(&solve_bsvie(m, &v, &SameTerminal(inst.x.clone())).unwrap(), &sol);
    }

    #[test]
    fn marginal_is_difference_of_solves(kind in kind(), seed in 0u64..10_000) {
        let inst = random_instance(&InstanceSpec::new(seed, kind)).unwrap();
        let (m, d) = (&inst.model, &inst.driver);
        let lam = alloc_marginal(m, d, &inst.x, &inst.y).unwrap();
        let a = risk_measure(m, d, &inst.y).unwrap();
        let b = risk_measure(m, d, &(&inst.y - &inst.x)).unwrap();
        prop_assert!(lam.values.max_abs_diff(&a.y().zip_with(b.y(), |u, v| u - v)) <= 1e-12);
    }

    #[test]
    fn subdifferential_allocation_is_linear_in_the_unit(kind in kind(), seed in 0u64..10_000, a in -2.0f64..2.0) {
        // Lambda(X) - Lambda(0) is linear in X.
        let inst = random_instance(&InstanceSpec::new(seed, kind)).unwrap();
        let (m, d) = (&inst.model, &inst.driver);
        let alloc = Allocator::prepare(Rule::Sub, m, d, &inst.y, &RuleParams { sign: SignVariant::Corrected, ..RuleParams::default() }).unwrap();
        let claims = sample_claims(m, seed, 2, 1.0).unwrap();
        let mix = claims[0].zip_with(&claims[1], |u, v| a * u + v);
        let l = |x: &TerminalClaim| alloc.apply(x).unwrap();
        let l0 = l(&TerminalClaim::zero(m));
        let centered = |x: &TerminalClaim| l(x).zip_with(&l0, |u, v| u - v);
        let lhs = centered(&mix);
        let rhs = centered(&claims[0]).zip_with(&centered(&claims[1]), |u, v| a * u + v);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-11);
    }
}

#[test]
fn layouts_agree_for_terminal_claims() {
    let node = LatticeModel::with(1.0, 10, Layout::Node).unwrap();
    let path = LatticeModel::with(1.0, 10, Layout::Path).unwrap();
    let f = |b: f64| (1.0 - b).max(0.0) - 0.2 * b;
    for d in [
        BuiltinDriver::Zero,
        BuiltinDriver::linear_ambiguous(0.02, 0.2),
        BuiltinDriver::entropic(0.8).unwrap(),
        BuiltinDriver::cserm(0.15, 1.1).unwrap(),
        BuiltinDriver::linear_generic(0.1, -0.3),
    ] {
        let a = risk_measure(&node, &d, &node.claim_of_terminal(f)).unwrap();
        let b = risk_measure(&path, &d, &path.claim_of_terminal(f)).unwrap();
        for k in 0..=10 {
            for p in 0..path.state_count(k) {
                let s = path.up_moves(k, p);
                assert!(
                    (a.y().get(k, s) - b.y().get(k, p)).abs() <= 1e-12,
                    "{}",
                    d.tag()
                );
            }
        }
    }
}
