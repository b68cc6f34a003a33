//! Kernel-level checks for the transport solvers: brute-force oracles for
//! the exact solvers, feasibility/identity properties for Sinkhorn, and
//! finite-difference gradients through the unrolled iterations.

use itertools::Itertools;
use otsa::autodiff::{Array, Tape, Tensor};
use otsa::gradcheck::{central_diff, relative_error};
use otsa::ot::{
    distance_costs, emd_exact, emd_with_sinkhorn_surrogate, entropy, hungarian, sinkhorn,
    CostMatrix, Domain, Marginals, Metric, SinkhornConfig,
};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

fn random_cost(m: usize, n: usize, rng: &mut ChaCha12Rng) -> CostMatrix {
    let data: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    CostMatrix::from_array(Array::from_vec(vec![m, n], data).unwrap()).unwrap()
}

/// Minimum assignment cost over all permutations (oracle for square
/// uniform-marginal transport and for the Hungarian solver).
fn brute_force_min_cost(cost: &CostMatrix) -> f64 {
    let n = cost.rows();
    (0..n)
        .permutations(n)
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(i, &j)| cost.tensor().get2(i, j))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn sinkhorn_uniform_cost_gives_uniform_plan() {
    let cost = CostMatrix::from_array(Array::zeros(vec![2, 2])).unwrap();
    let marg = Marginals::all_ones(2);
    let (plan, _) = sinkhorn(&cost, &marg, &SinkhornConfig::default(), None).unwrap();
    for &p in plan.values.data() {
        assert!((p - 0.5).abs() <= 1e-12);
    }
}

#[test]
fn sinkhorn_low_temperature_sharpens_to_diagonal() {
    let cost = CostMatrix::from_array(
        Array::from_vec(vec![2, 2], vec![0.0, 10.0, 10.0, 0.0]).unwrap(),
    )
    .unwrap();
    let marg = Marginals::all_ones(2);
    let cfg = SinkhornConfig {
        temperature: 0.1,
        ..Default::default()
    };
    let (plan, _) = sinkhorn(&cost, &marg, &cfg, None).unwrap();
    assert!(plan.values.get2(0, 0) >= 1.0 - 1e-6);
    assert!(plan.values.get2(1, 1) >= 1.0 - 1e-6);
}

#[test]
fn single_sweep_with_unit_marginals_is_softmax_then_normalize() {
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    for _ in 0..10 {
        let cost = random_cost(4, 4, &mut rng);
        let marg = Marginals::all_ones(4);
        let cfg = SinkhornConfig {
            temperature: 1.0,
            max_iterations: 1,
            tolerance: 0.0,
            domain: Domain::Plain,
        };
        let (plan, _) = sinkhorn(&cost, &marg, &cfg, None).unwrap();

        // softmax over rows of -C per column, then rescale each row to 1.
        let soft = cost.tensor().neg().unwrap().softmax(0).unwrap();
        let row_sums = soft.sum_axis(1).unwrap();
        let m = 4;
        let mut expected = vec![0.0; 16];
        for i in 0..m {
            for j in 0..m {
                expected[i * m + j] = soft.get2(i, j) / row_sums.data()[i];
            }
        }
        let expected = Array::from_vec(vec![4, 4], expected).unwrap();
        assert!(plan.values.array().max_abs_diff(&expected) <= 1e-12);
    }
}

#[test]
fn sinkhorn_feasibility_on_random_instances() {
    let mut rng = ChaCha12Rng::seed_from_u64(103);
    for trial in 0..200 {
        let m = rng.gen_range(2..=16);
        let n = rng.gen_range(2..=16);
        let cost = random_cost(m, n, &mut rng);
        let marg = Marginals::uniform_rows(m, n);
        let cfg = if trial % 3 == 0 {
            SinkhornConfig {
                domain: Domain::Log,
                ..Default::default()
            }
        } else {
            SinkhornConfig::default()
        };
        let (plan, _) = sinkhorn(&cost, &marg, &cfg, None).unwrap();
        assert!(plan.converged, "instance {trial} did not converge");
        assert!(
            plan.marginal_violation(&marg) <= 1e-6,
            "violation {} on trial {trial}",
            plan.marginal_violation(&marg)
        );
    }
}

#[test]
fn sinkhorn_cost_shift_invariance() {
    let mut rng = ChaCha12Rng::seed_from_u64(107);
    let cost = random_cost(5, 7, &mut rng);
    let marg = Marginals::uniform_rows(5, 7);
    let cfg = SinkhornConfig {
        tolerance: 1e-12,
        ..Default::default()
    };
    let (base, _) = sinkhorn(&cost, &marg, &cfg, None).unwrap();

    // Add a constant to one full row and one full column.
    let mut shifted = cost.tensor().data().to_vec();
    for j in 0..7 {
        shifted[2 * 7 + j] += 3.25;
    }
    for row in shifted.chunks_mut(7) {
        row[4] -= 1.5;
    }
    let shifted =
        CostMatrix::from_array(Array::from_vec(vec![5, 7], shifted).unwrap()).unwrap();
    let (moved, _) = sinkhorn(&shifted, &marg, &cfg, None).unwrap();
    assert!(base.values.array().max_abs_diff(moved.values.array()) <= 1e-9);
}

#[test]
fn sinkhorn_temperature_identity() {
    let mut rng = ChaCha12Rng::seed_from_u64(109);
    for &tau in &[0.3, 0.7, 2.0] {
        let cost = random_cost(4, 6, &mut rng);
        let marg = Marginals::uniform_rows(4, 6);
        let cfg_tau = SinkhornConfig {
            temperature: tau,
            tolerance: 1e-10,
            ..Default::default()
        };
        let cfg_one = SinkhornConfig {
            temperature: 1.0,
            tolerance: 1e-10,
            ..Default::default()
        };
        let scaled = CostMatrix::new(cost.tensor().scale(1.0 / tau).unwrap()).unwrap();
        let (p1, _) = sinkhorn(&cost, &marg, &cfg_tau, None).unwrap();
        let (p2, _) = sinkhorn(&scaled, &marg, &cfg_one, None).unwrap();
        assert!(p1.values.array().max_abs_diff(p2.values.array()) <= 1e-9);
    }
}

#[test]
fn warm_start_reconstructs_plan_exactly() {
    let mut rng = ChaCha12Rng::seed_from_u64(113);
    for log in [false, true] {
        let cost = random_cost(5, 5, &mut rng);
        let marg = Marginals::all_ones(5);
        let cfg = SinkhornConfig {
            domain: if log { Domain::Log } else { Domain::Plain },
            ..Default::default()
        };
        let (plan, sv) = sinkhorn(&cost, &marg, &cfg, None).unwrap();
        let rebuilt = sv.apply(&cost, cfg.temperature).unwrap();
        assert!(plan.values.array().max_abs_diff(rebuilt.array()) <= 1e-12);

        // Warm-started resolve on the same cost converges immediately.
        let (plan2, _) = sinkhorn(&cost, &marg, &cfg, Some(&sv)).unwrap();
        assert!(plan2.converged);
        assert_eq!(plan2.iterations, 0);
    }
}

#[test]
fn plain_domain_underflow_reports_temperature() {
    // The second row underflows entirely in exp(-C/tau) at this temperature.
    let cost = CostMatrix::from_array(
        Array::from_vec(vec![2, 2], vec![0.0, 1.0, 5000.0, 6000.0]).unwrap(),
    )
    .unwrap();
    let marg = Marginals::all_ones(2);
    let cfg = SinkhornConfig {
        temperature: 1e-3,
        domain: Domain::Plain,
        ..Default::default()
    };
    let err = sinkhorn(&cost, &marg, &cfg, None).unwrap_err();
    assert!(err.to_string().contains("log_domain"), "got: {err}");

    // Auto domain switches to log and succeeds on the same instance.
    let cfg = SinkhornConfig {
        temperature: 1e-3,
        domain: Domain::Auto,
        ..Default::default()
    };
    let (plan, _) = sinkhorn(&cost, &marg, &cfg, None).unwrap();
    assert!(plan.values.get2(0, 1) > 0.999);
    assert!(plan.values.get2(1, 0) > 0.999);
}

#[test]
fn sinkhorn_mass_mismatch_is_rejected() {
    let a = Tensor::from(Array::ones(vec![2]));
    let b = Tensor::from(Array::full(vec![3], 1.0));
    assert!(Marginals::new(a, b).is_err());
}

#[test]
fn entropy_of_sinkhorn_gradient_matches_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(127);
    for &tau in &[0.5, 1.0] {
        let m = 4;
        let n = 5;
        let data: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Array::from_vec(vec![m, n], data).unwrap();
        let marg = Marginals::uniform_rows(m, n);
        let cfg = SinkhornConfig {
            temperature: tau,
            max_iterations: 30,
            tolerance: 0.0,
            domain: Domain::Plain,
        };

        let tape = Tape::new();
        let ct = tape.watch(x.clone());
        let cost = CostMatrix::new(ct.clone()).unwrap();
        let (plan, _) = sinkhorn(&cost, &marg, &cfg, None).unwrap();
        let h = entropy(&plan).unwrap();
        let g = h.backward().unwrap().wrt(&ct).unwrap();

        let mut eval = |arr: &Array| {
            let cost = CostMatrix::from_array(arr.clone()).unwrap();
            let (plan, _) = sinkhorn(&cost, &marg, &cfg, None).unwrap();
            entropy(&plan).unwrap().value()
        };
        let numeric = central_diff(&mut eval, &x, 1e-5);
        let err = relative_error(g.array(), &numeric);
        assert!(err <= 1e-4, "rel err {err:.3e} at tau {tau}");
    }
}

#[test]
fn emd_matches_brute_force_on_small_square_instances() {
    let mut rng = ChaCha12Rng::seed_from_u64(131);
    for n in 2..=6 {
        for _ in 0..100 {
            let cost = random_cost(n, n, &mut rng);
            let marg = Marginals::all_ones(n);
            let plan = emd_exact(&cost, &marg).unwrap();
            let best = brute_force_min_cost(&cost);
            assert!(
                (plan.total_cost(&cost) - best).abs() <= 1e-9,
                "n={n}: got {} vs {best}",
                plan.total_cost(&cost)
            );
            assert!(plan.nonzeros() <= 2 * n - 1);
            assert!(plan.marginal_violation(&marg) <= 1e-9);
        }
    }
}

#[test]
fn emd_plan_support_matches_hungarian_on_square_costs() {
    let mut rng = ChaCha12Rng::seed_from_u64(137);
    for _ in 0..50 {
        let cost = random_cost(5, 5, &mut rng);
        let marg = Marginals::all_ones(5);
        let plan = emd_exact(&cost, &marg).unwrap();
        let assignment = hungarian(&cost).unwrap();
        assert!((plan.total_cost(&cost) - assignment.total_cost).abs() <= 1e-9);
    }
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = ChaCha12Rng::seed_from_u64(139);
    for _ in 0..100 {
        let cost = random_cost(6, 6, &mut rng);
        let a = hungarian(&cost).unwrap();
        let best = brute_force_min_cost(&cost);
        assert!((a.total_cost - best).abs() <= 1e-9);
        // Columns are a permutation.
        let mut seen = [false; 6];
        for &j in &a.cols {
            assert!(!seen[j]);
            seen[j] = true;
        }
    }
}

#[test]
fn surrogate_row_sums_double_and_gradient_is_sinkhorns() {
    let mut rng = ChaCha12Rng::seed_from_u64(149);
    let x = Array::from_vec(vec![3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let marg = Marginals::all_ones(3);
    let cfg = SinkhornConfig {
        max_iterations: 40,
        tolerance: 0.0,
        domain: Domain::Plain,
        ..Default::default()
    };

    let tape = Tape::new();
    let ct = tape.watch(x.clone());
    let cost = CostMatrix::new(ct.clone()).unwrap();
    let combined = emd_with_sinkhorn_surrogate(&cost, &marg, &cfg).unwrap();
    for s in combined.row_sums() {
        assert!((s - 2.0).abs() <= 1e-6);
    }
    let sum = combined.values.sum_all().unwrap();
    let g_combined = sum.backward().unwrap().wrt(&ct).unwrap();

    let tape2 = Tape::new();
    let ct2 = tape2.watch(x.clone());
    let cost2 = CostMatrix::new(ct2.clone()).unwrap();
    let (soft, _) = sinkhorn(&cost2, &marg, &cfg, None).unwrap();
    let g_soft = soft
        .values
        .sum_all()
        .unwrap()
        .backward()
        .unwrap()
        .wrt(&ct2)
        .unwrap();
    assert!(g_combined.array().max_abs_diff(g_soft.array()) <= 1e-12);
}

#[test]
fn surrogate_on_equal_costs_is_permutation_plus_uniform() {
    let cost =
        CostMatrix::from_array(Array::from_vec(vec![2, 2], vec![1.0; 4]).unwrap()).unwrap();
    let marg = Marginals::all_ones(2);
    let cfg = SinkhornConfig::default();
    let combined = emd_with_sinkhorn_surrogate(&cost, &marg, &cfg).unwrap();
    let exact = emd_exact(&cost, &marg).unwrap();
    let mut expected = vec![0.0; 4];
    for (e, x) in expected.iter_mut().zip(exact.values.data()) {
        *e = x + 0.5;
    }
    let expected = Array::from_vec(vec![2, 2], expected).unwrap();
    assert!(combined.values.array().max_abs_diff(&expected) <= 1e-9);
}

#[test]
fn l2_and_neg_dot_yield_the_same_plan() {
    let mut rng = ChaCha12Rng::seed_from_u64(151);
    for _ in 0..20 {
        let q_data: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k_data: Vec<f64> = (0..5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = Tensor::from(Array::from_vec(vec![4, 3], q_data).unwrap());
        let k = Tensor::from(Array::from_vec(vec![5, 3], k_data).unwrap());
        let marg = Marginals::uniform_rows(4, 5);
        let cfg = SinkhornConfig {
            tolerance: 1e-12,
            ..Default::default()
        };

        let c_dot = distance_costs(&q, &k, Metric::NegDot).unwrap();
        let c_l2 = distance_costs(&q, &k, Metric::L2).unwrap();
        let (p_dot, _) = sinkhorn(&c_dot, &marg, &cfg, None).unwrap();
        let (p_l2, _) = sinkhorn(&c_l2, &marg, &cfg, None).unwrap();
        assert!(p_dot.values.array().max_abs_diff(p_l2.values.array()) <= 1e-9);
    }
}
