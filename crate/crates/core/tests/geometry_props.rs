use nalgebra::DVector;
use proptest::prelude::*;
use singarc::geometry::{lie_bracket, poisson, CotangentPoint, LiftedHamiltonian, VectorField};
use singarc::symexpr::Expr;

const N: usize = 3;
const N_PARAM: usize = 1;

/// Smooth scalar expressions in `x1..x3`, `r1`.
fn component() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-2.0f64..2.0).prop_map(Expr::constant),
        (0..N).prop_map(Expr::state),
        Just(Expr::param(0)),
    ];
    leaf.prop_recursive(3, 16, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a.add(&b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a.mul(&b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a.div(&Expr::constant(2.0).add(&b.sin()))),
            inner.clone().prop_map(|a| a.sin()),
            inner.clone().prop_map(|a| a.cos()),
            inner.prop_map(|a| a.powi(2)),
        ]
    })
}

fn field() -> impl Strategy<Value = VectorField> {
    proptest::collection::vec(component(), N).prop_map(|c| VectorField::new(c, N_PARAM).unwrap())
}

fn covector_point() -> impl Strategy<Value = (CotangentPoint, Vec<f64>)> {
    (
        proptest::collection::vec(-1.0f64..1.0, N),
        proptest::collection::vec(-1.0f64..1.0, N),
        proptest::collection::vec(-0.5f64..0.5, N_PARAM),
    )
        .prop_map(|(p, q, r)| (CotangentPoint::from_slices(&p, &q), r))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn poisson_bracket_is_lifted_lie_bracket(f in field(), g in field(), (l, r) in covector_point()) {
        let lhs = poisson(&LiftedHamiltonian::new(&f), &LiftedHamiltonian::new(&g), &l, &r).unwrap();
        let fg = lie_bracket(&f, &g).unwrap().eval(l.q.as_slice(), &r).unwrap();
        let rhs = l.p.dot(&fg);
        prop_assert!(close(lhs, rhs, 1e-10), "poisson {} vs lifted bracket {}", lhs, rhs);
    }

    #[test]
    fn brackets_are_antisymmetric(f in field(), g in field(), (l, r) in covector_point()) {
        let q = l.q.as_slice();
        let fg = lie_bracket(&f, &g).unwrap().eval(q, &r).unwrap();
        let gf = lie_bracket(&g, &f).unwrap().eval(q, &r).unwrap();
        let scale = fg.amax().max(1.0);
        prop_assert!((&fg + &gf).amax() <= 1e-12 * scale, "[f,g]+[g,f] = {}", &fg + &gf);

        let (hf, hg) = (LiftedHamiltonian::new(&f), LiftedHamiltonian::new(&g));
        let a = poisson(&hf, &hg, &l, &r).unwrap();
        let b = poisson(&hg, &hf, &l, &r).unwrap();
        prop_assert!((a + b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn lift_state_part_is_the_field(f in field(), (l, r) in covector_point()) {
        let lifted = LiftedHamiltonian::new(&f).vector_field(&l, &r).unwrap();
        let direct: DVector<f64> = f.eval(l.q.as_slice(), &r).unwrap();
        prop_assert_eq!(lifted.q, direct);
    }
}
