use std::fmt::{self, Write};

use super::{Expr, Node, Var};

const PREC_SUM: u8 = 1;
const PREC_PRODUCT: u8 = 2;
const PREC_UNARY: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn precedence(e: &Expr) -> u8 {
    match e.node() {
        Node::Add(..) | Node::Sub(..) => PREC_SUM,
        Node::Mul(..) | Node::Div(..) => PREC_PRODUCT,
        Node::Neg(_) => PREC_UNARY,
        Node::Pow(..) => PREC_POW,
        Node::Num(_) | Node::Var(_) | Node::Call(..) => PREC_ATOM,
    }
}

fn write_number(f: &mut fmt::Formatter<'_>, v: f64) -> fmt::Result {
    let a = v.abs();
    if a != 0.0 && !(1e-6..1e16).contains(&a) {
        write!(f, "{v:e}")
    } else {
        write!(f, "{v}")
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool) -> fmt::Result {
    if parens {
        f.write_char('(')?;
        write_expr(f, e)?;
        f.write_char(')')
    } else {
        write_expr(f, e)
    }
}

/// Writes `e` with the minimal parentheses that make parsing reproduce the
/// same tree.
pub(super) fn write_expr(f: &mut fmt::Formatter<'_>, e: &Expr) -> fmt::Result {
    match e.node() {
        Node::Num(v) => write_number(f, *v),
        Node::Var(v) => match v {
            Var::State(i) => write!(f, "x{}", i + 1),
            Var::Param(i) => write!(f, "r{}", i + 1),
            Var::Costate(i) => write!(f, "p{}", i + 1),
        },
        Node::Neg(a) => {
            f.write_char('-')?;
            write_child(f, a, precedence(a) < PREC_UNARY)
        }
        Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
            let (op, prec) = match e.node() {
                Node::Add(..) => ('+', PREC_SUM),
                Node::Sub(..) => ('-', PREC_SUM),
                Node::Mul(..) => ('*', PREC_PRODUCT),
                _ => ('/', PREC_PRODUCT),
            };
            write_child(f, a, precedence(a) < prec)?;
            f.write_char(op)?;
            write_child(f, b, precedence(b) <= prec)
        }
        Node::Pow(a, k) => {
            write_child(f, a, precedence(a) < PREC_ATOM)?;
            write!(f, "^{k}")
        }
        Node::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_expr(f, a)?;
            f.write_char(')')
        }
    }
}
