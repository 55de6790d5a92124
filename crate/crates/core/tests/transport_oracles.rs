mod common;

use common::{rational_marginal, uniform_cost, vertex_enumeration_ot};
use otfeat::numerics::{MassDistribution, Matrix, RngState};
use otfeat::transport::{exact_ot_small, ot_loss, sinkhorn, SinkhornConfig};
use otfeat::Error;
use proptest::prelude::*;

fn cfg(eps: f64) -> SinkhornConfig {
    SinkhornConfig {
        epsilon: eps,
        ..SinkhornConfig::default()
    }
}

#[test]
fn simplex_matches_vertex_enumeration() {
    let mut rng = RngState::new(11);
    for _ in 0..40 {
        let (n, k) = (2 + rng.below(3), 2 + rng.below(3));
        let cost = uniform_cost(&mut rng, n, k, 2.0);
        let r = rational_marginal(&mut rng, n);
        let c = rational_marginal(&mut rng, k);
        let (plan, value) = exact_ot_small(&cost, &r, &c).unwrap();
        let oracle = vertex_enumeration_ot(&cost, r.weights(), c.weights());
        assert!((value - oracle).abs() < 1e-10, "{value} vs {oracle}");
        for (s, t) in plan.row_sums().iter().zip(r.weights()) {
            assert!((s - t).abs() < 1e-12);
        }
        for (s, t) in plan.col_sums().iter().zip(c.weights()) {
            assert!((s - t).abs() < 1e-12);
        }
        assert!(plan.as_slice().iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn simplex_hand_instance() {
    // Identity-favouring cost: the optimum keeps mass on the diagonal.
    let cost = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
    let r = MassDistribution::new(vec![0.5, 0.5]).unwrap();
    let (plan, v) = exact_ot_small(&cost, &r, &r).unwrap();
    assert_eq!(v, 0.0);
    assert_eq!(plan.get(0, 0), 0.5);
    assert_eq!(plan.get(1, 1), 0.5);
    // Forced unequal marginals: 0.2 must cross at cost 1.
    let r = MassDistribution::new(vec![0.7, 0.3]).unwrap();
    let c = MassDistribution::new(vec![0.5, 0.5]).unwrap();
    let (_, v) = exact_ot_small(&cost, &r, &c).unwrap();
    assert!((v - 0.2).abs() < 1e-15);
}

#[test]
fn simplex_rejects_large() {
    let cost = Matrix::zeros(9, 8);
    let r = MassDistribution::uniform(9).unwrap();
    let c = MassDistribution::uniform(8).unwrap();
    assert!(matches!(
        exact_ot_small(&cost, &r, &c),
        Err(Error::InstanceTooLarge { cells: 72, .. })
    ));
}

#[test]
fn sinkhorn_gap_shrinks_with_epsilon() {
    let mut rng = RngState::new(5);
    for _ in 0..10 {
        let cost = uniform_cost(&mut rng, 5, 4, 2.0);
        let r = rational_marginal(&mut rng, 5);
        let c = rational_marginal(&mut rng, 4);
        let (_, exact) = exact_ot_small(&cost, &r, &c).unwrap();
        let mut prev = f64::INFINITY;
        for eps in [0.5, 0.1, 0.02, 0.004] {
            let plan = sinkhorn(&cost, &r, &c, &cfg(eps)).unwrap();
            assert!(plan.converged);
            let gap = ot_loss(&plan, &cost).unwrap() - exact;
            // Marginals hold to 1e-6, so the cost may dip below by residual * max cost.
            assert!(gap >= -1e-5, "entropic cost below the exact optimum: {gap}");
            // Entropic suboptimality is bounded by eps * log(n k).
            assert!(gap <= eps * (20f64).ln() + 1e-5);
            assert!(gap <= prev + 1e-5);
            prev = gap;
        }
    }
}

#[test]
fn sinkhorn_shift_invariance() {
    let mut rng = RngState::new(8);
    for _ in 0..10 {
        let cost = uniform_cost(&mut rng, 6, 5, 2.0);
        let r = rational_marginal(&mut rng, 6);
        let c = rational_marginal(&mut rng, 5);
        let shifted = Matrix::from_vec(6, 5, cost.as_slice().iter().map(|v| v + 3.7).collect())
            .unwrap();
        let a = sinkhorn(&cost, &r, &c, &cfg(0.05)).unwrap();
        let b = sinkhorn(&shifted, &r, &c, &cfg(0.05)).unwrap();
        for (x, y) in a.entries.as_slice().iter().zip(b.entries.as_slice()) {
            assert!((x - y).abs() <= 1e-8);
        }
    }
}

#[test]
fn sinkhorn_permutation_equivariance() {
    let mut rng = RngState::new(21);
    let (n, k) = (6, 4);
    let cost = uniform_cost(&mut rng, n, k, 2.0);
    let r = rational_marginal(&mut rng, n);
    let c = rational_marginal(&mut rng, k);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let pcost = Matrix::from_rows(&perm.iter().map(|&i| cost.row(i).to_vec()).collect::<Vec<_>>())
        .unwrap();
    let pr = MassDistribution::new(perm.iter().map(|&i| r.weights()[i]).collect()).unwrap();
    let a = sinkhorn(&cost, &r, &c, &cfg(0.05)).unwrap();
    let b = sinkhorn(&pcost, &pr, &c, &cfg(0.05)).unwrap();
    for (row, &i) in perm.iter().enumerate() {
        for j in 0..k {
            assert!((b.entries.get(row, j) - a.entries.get(i, j)).abs() < 1e-10);
        }
    }
}

#[test]
fn sinkhorn_zero_mass_rows_stay_empty() {
    let cost = Matrix::from_rows(&[[0.1, 0.9], [0.5, 0.5], [0.9, 0.1]]).unwrap();
    let r = MassDistribution::new(vec![0.5, 0.0, 0.5]).unwrap();
    let c = MassDistribution::uniform(2).unwrap();
    let plan = sinkhorn(&cost, &r, &c, &cfg(0.05)).unwrap();
    assert_eq!(plan.entries.row(1), &[0.0, 0.0]);
    let (dr, dc) = plan.marginal_residuals();
    assert!(dr <= 1e-6 && dc <= 1e-6);
}

#[test]
fn sinkhorn_rejects_bad_input() {
    let r = MassDistribution::uniform(2).unwrap();
    let c = MassDistribution::uniform(3).unwrap();
    assert!(sinkhorn(&Matrix::zeros(3, 3), &r, &c, &cfg(0.05)).is_err());
    assert!(matches!(
        sinkhorn(&Matrix::zeros(2, 3), &r, &c, &cfg(0.0)),
        Err(Error::InvalidConfig(_))
    ));
    let mut bad = Matrix::zeros(2, 3);
    bad.set(0, 0, f64::NAN);
    assert!(sinkhorn(&bad, &r, &c, &cfg(0.05)).is_err());
}

fn instance(seed: u64, n: usize, k: usize) -> (Matrix, MassDistribution, MassDistribution) {
    let mut rng = RngState::new(seed);
    let cost = uniform_cost(&mut rng, n, k, 2.0);
    let r = rational_marginal(&mut rng, n);
    let c = rational_marginal(&mut rng, k);
    (cost, r, c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plan_is_a_coupling(seed in any::<u64>(), n in 1usize..12, k in 1usize..12,
                          eps in 0.01f64..1.0) {
        let (cost, r, c) = instance(seed, n, k);
        let plan = sinkhorn(&cost, &r, &c, &cfg(eps)).unwrap();
        prop_assert!(plan.converged);
        prop_assert!(plan.entries.as_slice().iter().all(|&p| p >= 0.0 && p.is_finite()));
        let (dr, dc) = plan.marginal_residuals();
        prop_assert!(dr <= 1e-6 && dc <= 1e-6, "residuals {} {}", dr, dc);
        let total: f64 = plan.entries.as_slice().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn entropic_cost_above_exact(seed in any::<u64>(), n in 1usize..6, k in 1usize..6) {
        let (cost, r, c) = instance(seed, n, k);
        let (_, exact) = exact_ot_small(&cost, &r, &c).unwrap();
        let plan = sinkhorn(&cost, &r, &c, &cfg(0.05)).unwrap();
        let v = ot_loss(&plan, &cost).unwrap();
        // A plan feasible to within 1e-6 can undercut the optimum only by
        // residual * max cost.
        prop_assert!(v >= exact - 1e-5);
    }

    #[test]
    fn exact_plan_is_feasible(seed in any::<u64>(), n in 1usize..8, k in 1usize..8) {
        prop_assume!(n * k <= 64);
        let (cost, r, c) = instance(seed, n, k);
        let (plan, v) = exact_ot_small(&cost, &r, &c).unwrap();
        prop_assert!(plan.as_slice().iter().all(|&p| p >= 0.0));
        for (s, t) in plan.row_sums().iter().zip(r.weights()) {
            prop_assert!((s - t).abs() < 1e-12);
        }
        for (s, t) in plan.col_sums().iter().zip(c.weights()) {
            prop_assert!((s - t).abs() < 1e-12);
        }
        let direct: f64 = plan.as_slice().iter().zip(cost.as_slice()).map(|(p, c)| p * c).sum();
        prop_assert!((direct - v).abs() < 1e-12);
    }
}
