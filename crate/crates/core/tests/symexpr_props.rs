mod common;

use common::{any_tree, eval_at, fd, point, smooth_tree, var, N_PARAM, N_STATE};
use proptest::prelude::*;
use singarc::symexpr::{parse, Expr};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn print_then_parse_is_identity(e in any_tree()) {
        let text = e.to_string();
        let back = parse(&text, N_STATE, N_PARAM).map_err(|err| TestCaseError::fail(format!("{text}: {err}")))?;
        prop_assert_eq!(back, e, "{}", text);
    }

    #[test]
    fn derivative_matches_finite_differences(e in smooth_tree(), (q, r) in point(), v in var()) {
        let value = eval_at(&e, &q, &r);
        prop_assume!(value.abs() < 1e6);
        let d = eval_at(&e.differentiate(v), &q, &r);
        let num = fd(&e, v, &q, &r);
        let scale = d.abs().max(value.abs()).max(1.0);
        prop_assert!((d - num).abs() <= 1e-6 * scale, "{}: d={} fd={}", e, d, num);
    }

    #[test]
    fn derivative_is_linear(
        e1 in smooth_tree(),
        e2 in smooth_tree(),
        a in -5.0f64..5.0,
        (q, r) in point(),
        v in var(),
    ) {
        let combo = Expr::constant(a).mul(&e1).add(&e2);
        let lhs = eval_at(&combo.differentiate(v), &q, &r);
        let rhs = a * eval_at(&e1.differentiate(v), &q, &r) + eval_at(&e2.differentiate(v), &q, &r);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "lhs={} rhs={}", lhs, rhs);
    }
}
