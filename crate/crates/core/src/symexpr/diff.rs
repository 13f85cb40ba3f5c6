use std::collections::HashMap;

use super::{Expr, Func, Node, Var};

pub(super) fn differentiate(e: &Expr, wrt: Var) -> Expr {
    let mut memo = HashMap::new();
    d(e, wrt, &mut memo)
}

fn d(e: &Expr, wrt: Var, memo: &mut HashMap<*const Node, Expr>) -> Expr {
    if let Some(hit) = memo.get(&e.ptr()) {
        return hit.clone();
    }
    let out = match e.node() {
        Node::Num(_) => Expr::zero(),
        Node::Var(v) => {
            if *v == wrt {
                Expr::one()
            } else {
                Expr::zero()
            }
        }
        Node::Neg(a) => d(a, wrt, memo).neg(),
        Node::Add(a, b) => d(a, wrt, memo).add(&d(b, wrt, memo)),
        Node::Sub(a, b) => d(a, wrt, memo).sub(&d(b, wrt, memo)),
        Node::Mul(a, b) => {
            let da = d(a, wrt, memo);
            let db = d(b, wrt, memo);
            da.mul(b).add(&a.mul(&db))
        }
        Node::Div(a, b) => {
            let da = d(a, wrt, memo);
            let db = d(b, wrt, memo);
            if db.is_zero() {
                da.div(b)
            } else {
                da.mul(b).sub(&a.mul(&db)).div(&b.powi(2))
            }
        }
        Node::Pow(a, k) => {
            let da = d(a, wrt, memo);
            Expr::constant(f64::from(*k)).mul(&a.powi(k - 1)).mul(&da)
        }
        Node::Call(f, a) => {
            let da = d(a, wrt, memo);
            if da.is_zero() {
                Expr::zero()
            } else {
                let outer = match f {
                    Func::Sin => a.cos(),
                    Func::Cos => a.sin().neg(),
                    Func::Exp => e.clone(),
                    Func::Sqrt => Expr::one().div(&Expr::constant(2.0).mul(e)),
                };
                outer.mul(&da)
            }
        }
    };
    memo.insert(e.ptr(), out.clone());
    out
}

pub(super) fn substitute(e: &Expr, f: &dyn Fn(Var) -> Option<Expr>) -> Expr {
    let mut memo = HashMap::new();
    subst(e, f, &mut memo)
}

fn subst(e: &Expr, f: &dyn Fn(Var) -> Option<Expr>, memo: &mut HashMap<*const Node, Expr>) -> Expr {
    if let Some(hit) = memo.get(&e.ptr()) {
        return hit.clone();
    }
    let out = match e.node() {
        Node::Num(_) => e.clone(),
        Node::Var(v) => f(*v).unwrap_or_else(|| e.clone()),
        Node::Neg(a) => subst(a, f, memo).neg(),
        Node::Add(a, b) => subst(a, f, memo).add(&subst(b, f, memo)),
        Node::Sub(a, b) => subst(a, f, memo).sub(&subst(b, f, memo)),
        Node::Mul(a, b) => subst(a, f, memo).mul(&subst(b, f, memo)),
        Node::Div(a, b) => subst(a, f, memo).div(&subst(b, f, memo)),
        Node::Pow(a, k) => subst(a, f, memo).powi(*k),
        Node::Call(func, a) => Expr::call(*func, &subst(a, f, memo)),
    };
    memo.insert(e.ptr(), out.clone());
    out
}
