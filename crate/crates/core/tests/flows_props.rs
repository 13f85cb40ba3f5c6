use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use singarc::flows::{integrate, variational, HamiltonianField, IntegratorOptions};
use singarc::geometry::CotangentPoint;
use singarc::symexpr::{parse, Expr};
use singarc::testing::perturbed_dubins;

fn bang_field(seed: u64, u: f64) -> HamiltonianField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HamiltonianField::bang(&perturbed_dubins(&mut rng, 0.3), u).unwrap()
}

fn start() -> impl Strategy<Value = (CotangentPoint, Vec<f64>)> {
    (
        proptest::collection::vec(-1.0f64..1.0, 3),
        proptest::collection::vec(-1.0f64..1.0, 3),
        proptest::collection::vec(-0.1f64..0.1, 2),
    )
        .prop_map(|(p, q, r)| (CotangentPoint::from_slices(&p, &q), r))
}

fn control() -> impl Strategy<Value = f64> {
    prop_oneof![Just(-1.0), Just(1.0)]
}

// Pendulum with a quartic spring: H = p1^2/2 + p2^2/2 - cos(q1) + q2^4/4 + q1*q2/2.
fn pendulum() -> HamiltonianField {
    let n = 2;
    let mut h: Expr = parse("0.5*x1*x2 - cos(x1) + x2^4/4", n, 0).unwrap();
    for j in 0..n {
        h = h.add(&Expr::costate(j).powi(2).mul(&Expr::constant(0.5)));
    }
    HamiltonianField::from_hamiltonian(h, n, 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bang_hamiltonian_is_conserved(seed in any::<u64>(), u in control(), (l0, r) in start()) {
        let h = bang_field(seed, u);
        let opts = IntegratorOptions::default();
        let seg = integrate(&h, &l0, 0.0, 1.0, &r, &opts).unwrap();
        let h0 = h.value(&l0, &r).unwrap();
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            let drift = (h.value(&seg.point(t), &r).unwrap() - h0).abs();
            prop_assert!(drift <= 1e-8, "t={} drift={:e}", t, drift);
        }
    }

    #[test]
    fn conservative_field_keeps_its_energy(p in proptest::collection::vec(-1.0f64..1.0, 2), q in proptest::collection::vec(-1.0f64..1.0, 2)) {
        let h = pendulum();
        let l0 = CotangentPoint::from_slices(&p, &q);
        let seg = integrate(&h, &l0, 0.0, 1.0, &[], &IntegratorOptions::default()).unwrap();
        let drift = (h.value(&seg.end_point(), &[]).unwrap() - h.value(&l0, &[]).unwrap()).abs();
        prop_assert!(drift <= 1e-8, "drift={:e}", drift);
    }

    #[test]
    fn flows_compose(
        seed in any::<u64>(),
        u in control(),
        (l0, r) in start(),
        b in 0.1f64..1.9,
    ) {
        let h = bang_field(seed, u);
        let opts = IntegratorOptions::default();
        let ab = integrate(&h, &l0, 0.0, b, &r, &opts).unwrap();
        let bc = integrate(&h, &ab.end_point(), b, 2.0, &r, &opts).unwrap();
        let ac = integrate(&h, &l0, 0.0, 2.0, &r, &opts).unwrap();
        let diff = (ac.end_point().to_flat().iter())
            .zip(bc.end_point().to_flat())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let budget = 10.0 * (ab.error_estimate() + bc.error_estimate() + ac.error_estimate());
        prop_assert!(diff <= budget.max(1e-14), "diff={:e} budget={:e}", diff, budget);
    }

    #[test]
    fn transition_matrix_is_nearly_symplectic(seed in any::<u64>(), u in control(), (l0, r) in start()) {
        let h = bang_field(seed, u);
        let seg = variational(&h, &l0, 0.0, 1.0, &r, &IntegratorOptions::default()).unwrap();
        let (phi, _) = seg.end_variation();
        prop_assert!(singarc::flows::symplectic_defect(&phi) <= 1e-6);
    }
}
