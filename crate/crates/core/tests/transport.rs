use proptest::prelude::*;

use set_transport::kernels::{induced_sq_distance, KernelSpec};
use set_transport::sinkhorn::{
    exact_ot_uniform, marginal_violation, ot_cost, sinkhorn, transport_factored, wasserstein, wasserstein_y,
    FeatureSet, Measure, SinkhornSettings,
};
use set_transport::{Matrix, Rng};

fn points(n: usize, d: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.normal())
}

fn measure(n: usize, rng: &mut Rng) -> Measure {
    let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.2, 1.0)).collect();
    let s: f64 = w.iter().sum();
    Measure::new(w.into_iter().map(|v| v / s).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn plans_are_feasible(seed in 0u64..10_000, n in 1usize..24, m in 1usize..24, eps in 0.05f64..1.0) {
        let mut rng = Rng::new(seed);
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let cost = induced_sq_distance(&points(n, 3, &mut rng), &points(m, 3, &mut rng), &spec).unwrap();
        let (g, h) = (measure(n, &mut rng), measure(m, &mut rng));
        let t = sinkhorn(&cost, &g, &h, &SinkhornSettings { epsilon: eps, tol: 1e-6, max_iter: 1000 }).unwrap();
        prop_assert!(t.converged);
        prop_assert!(marginal_violation(&t.plan, g.weights(), h.weights()) <= 1e-6);
        prop_assert!(t.plan.min_value() >= 0.0);
    }

    #[test]
    fn reference_distance_bounds_the_gap(seed in 0u64..10_000, n in 2usize..10, m in 2usize..10) {
        let mut rng = Rng::new(seed);
        let spec = KernelSpec::gaussian(1.5).unwrap();
        let settings = SinkhornSettings { epsilon: 0.05, tol: 1e-9, max_iter: 20_000 };
        let x = FeatureSet::uniform(points(n, 2, &mut rng)).unwrap();
        let x2 = FeatureSet::uniform(points(n + 1, 2, &mut rng)).unwrap();
        let y = points(m, 2, &mut rng);
        let w = wasserstein(&x, &x2, &spec, &settings).unwrap();
        let wy = wasserstein_y(&x, &x2, &y, &spec, &settings).unwrap();
        let yset = FeatureSet::uniform(y).unwrap();
        let wxy = wasserstein(&x, &yset, &spec, &settings).unwrap();
        let wx2y = wasserstein(&x2, &yset, &spec, &settings).unwrap();
        prop_assert!((w - wy).abs() <= 2.0 * wxy.min(wx2y) + 1e-6);
    }
}

#[test]
fn small_epsilon_approaches_the_permutation_optimum() {
    let mut rng = Rng::new(3);
    let spec = KernelSpec::gaussian(1.0).unwrap();
    for n in 2..=6 {
        let cost = induced_sq_distance(&points(n, 2, &mut rng), &points(n, 2, &mut rng), &spec).unwrap();
        let u = Measure::uniform(n).unwrap();
        let eps = 1e-3;
        let t = sinkhorn(&cost, &u, &u, &SinkhornSettings { epsilon: eps, tol: 1e-9, max_iter: 200_000 }).unwrap();
        let got = ot_cost(&t, &cost).unwrap().transport;
        let (exact, _) = exact_ot_uniform(&cost).unwrap();
        let slack = (0.01 * exact).max(5.0 * eps * ((n * n) as f64).ln());
        assert!((got - exact).abs() <= slack, "n={n}: {got} vs {exact}");
    }
}

#[test]
fn glued_plan_keeps_both_source_marginals() {
    let mut rng = Rng::new(8);
    let spec = KernelSpec::gaussian(1.0).unwrap();
    let settings = SinkhornSettings { epsilon: 0.1, tol: 1e-10, max_iter: 10_000 };
    let y = points(5, 3, &mut rng);
    let (x, x2) = (points(7, 3, &mut rng), points(4, 3, &mut rng));
    let (g, g2, h) = (measure(7, &mut rng), measure(4, &mut rng), Measure::uniform(5).unwrap());
    let tx = sinkhorn(&induced_sq_distance(&x, &y, &spec).unwrap(), &g, &h, &settings).unwrap();
    let tx2 = sinkhorn(&induced_sq_distance(&x2, &y, &spec).unwrap(), &g2, &h, &settings).unwrap();
    let ty = transport_factored(&tx, &tx2).unwrap();
    assert_eq!(ty.shape(), (7, 4));
    assert!(marginal_violation(&ty, g.weights(), g2.weights()) <= 1e-9);
}

#[test]
fn mismatched_references_are_rejected() {
    let spec = KernelSpec::gaussian(1.0).unwrap();
    let mut rng = Rng::new(1);
    let settings = SinkhornSettings::default();
    let x = points(3, 2, &mut rng);
    let a = sinkhorn(
        &induced_sq_distance(&x, &points(4, 2, &mut rng), &spec).unwrap(),
        &Measure::uniform(3).unwrap(),
        &Measure::uniform(4).unwrap(),
        &settings,
    )
    .unwrap();
    let b = sinkhorn(
        &induced_sq_distance(&x, &points(5, 2, &mut rng), &spec).unwrap(),
        &Measure::uniform(3).unwrap(),
        &Measure::uniform(5).unwrap(),
        &settings,
    )
    .unwrap();
    assert!(transport_factored(&a, &b).is_err());
}
