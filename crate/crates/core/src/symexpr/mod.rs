//! Scalar expressions over state, parameter and costate variables.
//!
//! Expressions are immutable DAGs (`Arc` shared nodes). Differentiation is
//! symbolic with constant folding and the usual 0/1 identities; nothing else
//! is simplified. Hot loops evaluate through a compiled [`Tape`].

mod diff;
mod parse;
mod print;
mod tape;

use std::fmt;
use std::ops;
use std::sync::Arc;

use thiserror::Error;

pub use parse::{parse, ParseError, ParseErrorKind};
pub use tape::{Layout, Tape};

/// A variable reference. Indices are zero-based; the textual form is
/// one-based (`x1`, `r1`, `p1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    State(usize),
    Param(usize),
    Costate(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "sqrt" => Some(Func::Sqrt),
            _ => None,
        }
    }
}

#[derive(Debug, PartialEq)]
pub enum Node {
    Num(f64),
    Var(Var),
    Neg(Expr),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Pow(Expr, i32),
    Call(Func, Expr),
}

/// Shared handle to an expression node.
#[derive(Clone, Debug)]
pub struct Expr(Arc<Node>);

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || *self.0 == *other.0
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("square root of negative value {0}")]
    NegativeSqrt(f64),
    #[error("zero raised to negative power {0}")]
    ZeroToNegativePower(i32),
    #[error("non-finite result")]
    NonFinite,
    #[error("variable {0:?} is not bound")]
    Unbound(Var),
}

/// Values for the three variable kinds. Missing slices are treated as
/// unbound and produce an error when referenced.
#[derive(Clone, Copy, Debug, Default)]
pub struct Env<'a> {
    pub q: &'a [f64],
    pub r: &'a [f64],
    pub p: &'a [f64],
}

impl<'a> Env<'a> {
    pub fn new(q: &'a [f64], r: &'a [f64]) -> Self {
        Env { q, r, p: &[] }
    }

    pub fn with_costate(q: &'a [f64], r: &'a [f64], p: &'a [f64]) -> Self {
        Env { q, r, p }
    }

    fn get(&self, v: Var) -> Result<f64, EvalError> {
        let slot = match v {
            Var::State(i) => self.q.get(i),
            Var::Param(i) => self.r.get(i),
            Var::Costate(i) => self.p.get(i),
        };
        slot.copied().ok_or(EvalError::Unbound(v))
    }
}

impl Expr {
    /// Wraps a node without any simplification. The parser uses this so the
    /// AST mirrors the source text.
    pub fn raw(node: Node) -> Expr {
        Expr(Arc::new(node))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    pub(crate) fn ptr(&self) -> *const Node {
        Arc::as_ptr(&self.0)
    }

    /// Numeric constant; negative values are stored as `Neg(Num(|v|))` so
    /// that printing and re-parsing is structurally stable.
    pub fn constant(v: f64) -> Expr {
        if v < 0.0 {
            Expr::raw(Node::Neg(Expr::raw(Node::Num(-v))))
        } else if v == 0.0 {
            Expr::raw(Node::Num(0.0))
        } else {
            Expr::raw(Node::Num(v))
        }
    }

    pub fn zero() -> Expr {
        Expr::constant(0.0)
    }

    pub fn one() -> Expr {
        Expr::constant(1.0)
    }

    pub fn var(v: Var) -> Expr {
        Expr::raw(Node::Var(v))
    }

    pub fn state(i: usize) -> Expr {
        Expr::var(Var::State(i))
    }

    pub fn param(i: usize) -> Expr {
        Expr::var(Var::Param(i))
    }

    pub fn costate(i: usize) -> Expr {
        Expr::var(Var::Costate(i))
    }

    pub fn as_const(&self) -> Option<f64> {
        match self.node() {
            Node::Num(v) => Some(*v),
            Node::Neg(inner) => match inner.node() {
                Node::Num(v) => Some(-*v),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    pub fn neg(&self) -> Expr {
        if let Some(v) = self.as_const() {
            return Expr::constant(-v);
        }
        if let Node::Neg(inner) = self.node() {
            return inner.clone();
        }
        Expr::raw(Node::Neg(self.clone()))
    }

    pub fn add(&self, rhs: &Expr) -> Expr {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a + b),
            (Some(a), _) if a == 0.0 => rhs.clone(),
            (_, Some(b)) if b == 0.0 => self.clone(),
            _ => Expr::raw(Node::Add(self.clone(), rhs.clone())),
        }
    }

    pub fn sub(&self, rhs: &Expr) -> Expr {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a - b),
            (Some(a), _) if a == 0.0 => rhs.neg(),
            (_, Some(b)) if b == 0.0 => self.clone(),
            _ => Expr::raw(Node::Sub(self.clone(), rhs.clone())),
        }
    }

    pub fn mul(&self, rhs: &Expr) -> Expr {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a * b),
            (Some(a), _) if a == 0.0 => Expr::zero(),
            (_, Some(b)) if b == 0.0 => Expr::zero(),
            (Some(a), _) if a == 1.0 => rhs.clone(),
            (_, Some(b)) if b == 1.0 => self.clone(),
            _ => Expr::raw(Node::Mul(self.clone(), rhs.clone())),
        }
    }

    pub fn div(&self, rhs: &Expr) -> Expr {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) if b != 0.0 => Expr::constant(a / b),
            (Some(a), _) if a == 0.0 => Expr::zero(),
            (_, Some(b)) if b == 1.0 => self.clone(),
            _ => Expr::raw(Node::Div(self.clone(), rhs.clone())),
        }
    }

    pub fn powi(&self, k: i32) -> Expr {
        if k == 0 {
            return Expr::one();
        }
        if k == 1 {
            return self.clone();
        }
        if let Some(v) = self.as_const() {
            if v != 0.0 || k > 0 {
                return Expr::constant(v.powi(k));
            }
        }
        Expr::raw(Node::Pow(self.clone(), k))
    }

    pub fn call(f: Func, arg: &Expr) -> Expr {
        if let Some(v) = arg.as_const() {
            if let Ok(value) = apply_func(f, v) {
                return Expr::constant(value);
            }
        }
        Expr::raw(Node::Call(f, arg.clone()))
    }

    pub fn sin(&self) -> Expr {
        Expr::call(Func::Sin, self)
    }

    pub fn cos(&self) -> Expr {
        Expr::call(Func::Cos, self)
    }

    pub fn exp(&self) -> Expr {
        Expr::call(Func::Exp, self)
    }

    pub fn sqrt(&self) -> Expr {
        Expr::call(Func::Sqrt, self)
    }

    /// Symbolic partial derivative with respect to `wrt`.
    pub fn differentiate(&self, wrt: Var) -> Expr {
        diff::differentiate(self, wrt)
    }

    /// Replaces variables according to `f`; `None` keeps the variable.
    pub fn substitute(&self, f: &dyn Fn(Var) -> Option<Expr>) -> Expr {
        diff::substitute(self, f)
    }

    /// Evaluates by tree walk. Prefer [`Tape`] in inner loops.
    pub fn eval(&self, env: &Env<'_>) -> Result<f64, EvalError> {
        let v = self.eval_inner(env)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    fn eval_inner(&self, env: &Env<'_>) -> Result<f64, EvalError> {
        Ok(match self.node() {
            Node::Num(v) => *v,
            Node::Var(v) => env.get(*v)?,
            Node::Neg(a) => -a.eval_inner(env)?,
            Node::Add(a, b) => a.eval_inner(env)? + b.eval_inner(env)?,
            Node::Sub(a, b) => a.eval_inner(env)? - b.eval_inner(env)?,
            Node::Mul(a, b) => a.eval_inner(env)? * b.eval_inner(env)?,
            Node::Div(a, b) => checked_div(a.eval_inner(env)?, b.eval_inner(env)?)?,
            Node::Pow(a, k) => checked_powi(a.eval_inner(env)?, *k)?,
            Node::Call(f, a) => apply_func(*f, a.eval_inner(env)?)?,
        })
    }

    /// Largest variable index of each kind, as one-based counts
    /// `(states, params, costates)`.
    pub fn var_extent(&self) -> (usize, usize, usize) {
        let mut ext = (0, 0, 0);
        self.visit_vars(&mut |v| match v {
            Var::State(i) => ext.0 = ext.0.max(i + 1),
            Var::Param(i) => ext.1 = ext.1.max(i + 1),
            Var::Costate(i) => ext.2 = ext.2.max(i + 1),
        });
        ext
    }

    pub fn depends_on_state(&self) -> bool {
        let mut hit = false;
        self.visit_vars(&mut |v| hit |= matches!(v, Var::State(_)));
        hit
    }

    fn visit_vars(&self, f: &mut dyn FnMut(Var)) {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(e) = stack.pop() {
            if !seen.insert(e.ptr()) {
                continue;
            }
            match e.node() {
                Node::Num(_) => {}
                Node::Var(v) => f(*v),
                Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => stack.push(a.clone()),
                Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                    stack.push(a.clone());
                    stack.push(b.clone());
                }
            }
        }
    }

    /// Number of distinct nodes in the DAG.
    pub fn node_count(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(e) = stack.pop() {
            if !seen.insert(e.ptr()) {
                continue;
            }
            match e.node() {
                Node::Num(_) | Node::Var(_) => {}
                Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => stack.push(a.clone()),
                Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                    stack.push(a.clone());
                    stack.push(b.clone());
                }
            }
        }
        seen.len()
    }
}

pub(crate) fn checked_div(a: f64, b: f64) -> Result<f64, EvalError> {
    if b == 0.0 {
        Err(EvalError::DivisionByZero)
    } else {
        Ok(a / b)
    }
}

pub(crate) fn checked_powi(a: f64, k: i32) -> Result<f64, EvalError> {
    if a == 0.0 && k < 0 {
        Err(EvalError::ZeroToNegativePower(k))
    } else {
        Ok(a.powi(k))
    }
}

pub(crate) fn apply_func(f: Func, x: f64) -> Result<f64, EvalError> {
    Ok(match f {
        Func::Sin => x.sin(),
        Func::Cos => x.cos(),
        Func::Exp => x.exp(),
        Func::Sqrt => {
            if x < 0.0 {
                return Err(EvalError::NegativeSqrt(x));
            }
            x.sqrt()
        }
    })
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        print::write_expr(f, self)
    }
}

macro_rules! impl_binop {
    ($tr:ident, $method:ident, $inner:ident) => {
        impl ops::$tr<&Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::$inner(self, rhs)
            }
        }
        impl ops::$tr<Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::$inner(&self, &rhs)
            }
        }
        impl ops::$tr<&Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::$inner(&self, rhs)
            }
        }
        impl ops::$tr<Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::$inner(self, &rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(&self)
    }
}

impl ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

/// Parses and evaluates in one go; handy for endpoint expressions.
pub fn eval_str(text: &str, n_state: usize, n_param: usize, env: &Env<'_>) -> Result<f64, crate::Error> {
    let e = parse(text, n_state, n_param)?;
    Ok(e.eval(env)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(text: &str, n: usize, m: usize) -> Expr {
        parse(text, n, m).unwrap()
    }

    #[test]
    fn parse_function_application() {
        let e = p("cos(x3)", 3, 0);
        assert_eq!(e, Expr::raw(Node::Call(Func::Cos, Expr::state(2))));
    }

    #[test]
    fn parse_flat_sum() {
        let e = p("cos(x3) + r1", 3, 2);
        let expected = Expr::raw(Node::Add(Expr::raw(Node::Call(Func::Cos, Expr::state(2))), Expr::param(0)));
        assert_eq!(e, expected);
    }

    #[test]
    fn parse_precedence() {
        let e = p("x1*x2 - 2", 2, 0);
        let expected = Expr::raw(Node::Sub(
            Expr::raw(Node::Mul(Expr::state(0), Expr::state(1))),
            Expr::raw(Node::Num(2.0)),
        ));
        assert_eq!(e, expected);
    }

    #[test]
    fn parse_pow_binds_tighter_than_unary_minus() {
        let e = p("-x1^2", 1, 0);
        let expected = Expr::raw(Node::Neg(Expr::raw(Node::Pow(Expr::state(0), 2))));
        assert_eq!(e, expected);
        let e = p("x1 - x2 - x3", 3, 0);
        // left associative
        match e.node() {
            Node::Sub(a, _) => assert!(matches!(a.node(), Node::Sub(_, _))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn derivative_examples() {
        let e = p("x1*x2", 2, 0);
        assert_eq!(e.differentiate(Var::State(0)).to_string(), "x2");
        let e = p("cos(x3)", 3, 0);
        assert_eq!(e.differentiate(Var::State(2)).to_string(), "-sin(x3)");
        let e = p("sin(x3)", 3, 0);
        let d2 = e.differentiate(Var::State(2)).differentiate(Var::State(2));
        assert_eq!(d2.to_string(), "-sin(x3)");
    }

    #[test]
    fn evaluate_examples() {
        let e = p("cos(x3)", 3, 0);
        assert_eq!(e.eval(&Env::new(&[0.0, 0.0, 0.0], &[])).unwrap(), 1.0);
        let e = p("cos(x3)+r1", 3, 2);
        let v = e.eval(&Env::new(&[0.0, 0.0, std::f64::consts::FRAC_PI_2], &[0.05, 0.0])).unwrap();
        assert!((v - 0.05).abs() < 1e-15);
        let e = p("x1*x2-2", 3, 0);
        assert_eq!(e.eval(&Env::new(&[3.0, 4.0, 0.0], &[])).unwrap(), 10.0);
    }

    #[test]
    fn domain_errors() {
        let e = p("1/x1", 1, 0);
        assert_eq!(e.eval(&Env::new(&[0.0], &[])), Err(EvalError::DivisionByZero));
        let e = p("sqrt(x1)", 1, 0);
        assert!(matches!(e.eval(&Env::new(&[-1.0], &[])), Err(EvalError::NegativeSqrt(_))));
        let e = p("exp(x1)", 1, 0);
        assert_eq!(e.eval(&Env::new(&[1e4], &[])), Err(EvalError::NonFinite));
    }

    #[test]
    fn constant_folding_and_identities() {
        let x = Expr::state(0);
        assert_eq!(&x * &Expr::one(), x);
        assert!((&x * &Expr::zero()).is_zero());
        assert_eq!(&Expr::zero() + &x, x);
        assert_eq!((Expr::constant(2.0) * Expr::constant(3.0)).as_const(), Some(6.0));
        assert_eq!(Expr::constant(-2.5).as_const(), Some(-2.5));
        assert_eq!((&Expr::zero() - &x).to_string(), "-x1");
    }
}
