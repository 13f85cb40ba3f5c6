//! Expression generators shared by the property suites and the acceptance run.

use proptest::prelude::*;
use singarc::symexpr::{Env, Expr, Func, Node, Var};

pub const N_STATE: usize = 3;
pub const N_PARAM: usize = 2;

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (0.0f64..10.0).prop_map(|v| Expr::raw(Node::Num(v))),
        (1e-9f64..1e-7).prop_map(|v| Expr::raw(Node::Num(v))),
        (0..N_STATE).prop_map(|i| Expr::raw(Node::Var(Var::State(i)))),
        (0..N_PARAM).prop_map(|i| Expr::raw(Node::Var(Var::Param(i)))),
    ]
}

fn func() -> impl Strategy<Value = Func> {
    prop_oneof![Just(Func::Sin), Just(Func::Cos), Just(Func::Exp), Just(Func::Sqrt)]
}

/// Arbitrary raw trees: every node kind, no simplification.
pub fn any_tree() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(5, 48, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|a| Expr::raw(Node::Neg(a))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::raw(Node::Add(a, b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::raw(Node::Sub(a, b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::raw(Node::Mul(a, b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::raw(Node::Div(a, b))),
            (inner.clone(), -4i32..=4).prop_map(|(a, k)| Expr::raw(Node::Pow(a, k))),
            (func(), inner).prop_map(|(f, a)| Expr::raw(Node::Call(f, a))),
        ]
    })
}

/// Trees that are smooth on all of R^n: divisions and square roots only see
/// arguments bounded away from zero.
pub fn smooth_tree() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (0.1f64..3.0).prop_map(Expr::constant),
        (0..N_STATE).prop_map(Expr::state),
        (0..N_PARAM).prop_map(Expr::param),
    ];
    leaf.prop_recursive(4, 32, 2, |inner| {
        let positive = |b: Expr| Expr::constant(1.0).add(&b.powi(2));
        prop_oneof![
            inner.clone().prop_map(|a| a.neg()),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a.add(&b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a.sub(&b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a.mul(&b)),
            (inner.clone(), inner.clone()).prop_map(move |(a, b)| a.div(&positive(b))),
            (inner.clone(), 0i32..=3).prop_map(|(a, k)| a.powi(k)),
            inner.clone().prop_map(|a| a.sin()),
            inner.clone().prop_map(|a| a.cos()),
            inner.clone().prop_map(|a| a.sin().exp()),
            inner.prop_map(move |a| positive(a).sqrt()),
        ]
    })
}

pub fn point() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        proptest::collection::vec(-1.0f64..1.0, N_STATE),
        proptest::collection::vec(-1.0f64..1.0, N_PARAM),
    )
}

pub fn var() -> impl Strategy<Value = Var> {
    prop_oneof![(0..N_STATE).prop_map(Var::State), (0..N_PARAM).prop_map(Var::Param)]
}

pub fn eval_at(e: &Expr, q: &[f64], r: &[f64]) -> f64 {
    e.eval(&Env::new(q, r)).expect("smooth tree evaluates")
}

/// Fourth-order central difference.
pub fn fd(e: &Expr, v: Var, q: &[f64], r: &[f64]) -> f64 {
    let shifted = |d: f64| {
        let (mut q, mut r) = (q.to_vec(), r.to_vec());
        match v {
            Var::State(i) => q[i] += d,
            Var::Param(i) => r[i] += d,
            Var::Costate(_) => unreachable!(),
        }
        eval_at(e, &q, &r)
    };
    let h = 1e-3;
    (8.0 * (shifted(h) - shifted(-h)) - (shifted(2.0 * h) - shifted(-2.0 * h))) / (12.0 * h)
}
