use std::collections::HashMap;

use super::{apply_func, checked_div, checked_powi, EvalError, Expr, Func, Node, Var};

/// Flat input layout `[p (n), q (n), r (m)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
}

impl Layout {
    pub fn new(n: usize, m: usize) -> Self {
        Layout { n, m }
    }

    pub fn len(&self) -> usize {
        2 * self.n + self.m
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, v: Var) -> usize {
        match v {
            Var::Costate(i) => i,
            Var::State(i) => self.n + i,
            Var::Param(i) => 2 * self.n + i,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Const(f64),
    Input(u32),
    Neg(u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Powi(u32, i32),
    Call(Func, u32),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Key {
    Const(u64),
    Input(u32),
    Neg(u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Powi(u32, i32),
    Call(Func, u32),
}

impl Op {
    fn key(&self) -> Key {
        match *self {
            Op::Const(v) => Key::Const(v.to_bits()),
            Op::Input(i) => Key::Input(i),
            Op::Neg(a) => Key::Neg(a),
            Op::Add(a, b) => Key::Add(a.min(b), a.max(b)),
            Op::Sub(a, b) => Key::Sub(a, b),
            Op::Mul(a, b) => Key::Mul(a.min(b), a.max(b)),
            Op::Div(a, b) => Key::Div(a, b),
            Op::Powi(a, k) => Key::Powi(a, k),
            Op::Call(f, a) => Key::Call(f, a),
        }
    }
}

/// A batch of expressions compiled to a straight-line program with
/// common subexpressions merged.
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<Op>,
    outputs: Vec<u32>,
    layout: Layout,
}

struct Compiler {
    ops: Vec<Op>,
    dedup: HashMap<Key, u32>,
    by_node: HashMap<*const Node, u32>,
    layout: Layout,
}

impl Compiler {
    fn push(&mut self, op: Op) -> u32 {
        let key = op.key();
        if let Some(&slot) = self.dedup.get(&key) {
            return slot;
        }
        let slot = self.ops.len() as u32;
        self.ops.push(op);
        self.dedup.insert(key, slot);
        slot
    }

    fn emit(&mut self, e: &Expr) -> u32 {
        if let Some(&slot) = self.by_node.get(&e.ptr()) {
            return slot;
        }
        let op = match e.node() {
            Node::Num(v) => Op::Const(*v),
            Node::Var(v) => Op::Input(self.layout.index(*v) as u32),
            Node::Neg(a) => Op::Neg(self.emit(a)),
            Node::Add(a, b) => {
                let (a, b) = (self.emit(a), self.emit(b));
                Op::Add(a, b)
            }
            Node::Sub(a, b) => {
                let (a, b) = (self.emit(a), self.emit(b));
                Op::Sub(a, b)
            }
            Node::Mul(a, b) => {
                let (a, b) = (self.emit(a), self.emit(b));
                Op::Mul(a, b)
            }
            Node::Div(a, b) => {
                let (a, b) = (self.emit(a), self.emit(b));
                Op::Div(a, b)
            }
            Node::Pow(a, k) => Op::Powi(self.emit(a), *k),
            Node::Call(f, a) => Op::Call(*f, self.emit(a)),
        };
        let slot = self.push(op);
        self.by_node.insert(e.ptr(), slot);
        slot
    }
}

impl Tape {
    pub fn compile(exprs: &[Expr], layout: Layout) -> Tape {
        let mut c = Compiler {
            ops: Vec::new(),
            dedup: HashMap::new(),
            by_node: HashMap::new(),
            layout,
        };
        let outputs = exprs.iter().map(|e| c.emit(e)).collect();
        Tape {
            ops: c.ops,
            outputs,
            layout,
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn n_ops(&self) -> usize {
        self.ops.len()
    }

    /// Evaluates every output. `scratch` is resized as needed and may be
    /// reused across calls.
    pub fn eval(&self, inputs: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) -> Result<(), EvalError> {
        debug_assert_eq!(inputs.len(), self.layout.len());
        debug_assert_eq!(out.len(), self.outputs.len());
        scratch.clear();
        scratch.reserve(self.ops.len());
        for op in &self.ops {
            let v = match *op {
                Op::Const(v) => v,
                Op::Input(i) => inputs[i as usize],
                Op::Neg(a) => -scratch[a as usize],
                Op::Add(a, b) => scratch[a as usize] + scratch[b as usize],
                Op::Sub(a, b) => scratch[a as usize] - scratch[b as usize],
                Op::Mul(a, b) => scratch[a as usize] * scratch[b as usize],
                Op::Div(a, b) => checked_div(scratch[a as usize], scratch[b as usize])?,
                Op::Powi(a, k) => checked_powi(scratch[a as usize], k)?,
                Op::Call(f, a) => apply_func(f, scratch[a as usize])?,
            };
            scratch.push(v);
        }
        for (o, &slot) in out.iter_mut().zip(&self.outputs) {
            let v = scratch[slot as usize];
            if !v.is_finite() {
                return Err(EvalError::NonFinite);
            }
            *o = v;
        }
        Ok(())
    }

    pub fn eval_vec(&self, inputs: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut scratch = Vec::new();
        let mut out = vec![0.0; self.outputs.len()];
        self.eval(inputs, &mut scratch, &mut out)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symexpr::{parse, Env};

    #[test]
    fn tape_matches_tree_evaluation() {
        let exprs: Vec<Expr> = ["x1*x2 + sin(x1*x2)", "cos(x3)/(1+x1^2) - r1", "sqrt(x2) * exp(-x1)"]
            .iter()
            .map(|s| parse(s, 3, 1).unwrap())
            .collect();
        let layout = Layout::new(3, 1);
        let tape = Tape::compile(&exprs, layout);
        let q = [0.3, 1.7, -0.4];
        let r = [0.25];
        let mut inputs = vec![0.0; layout.len()];
        inputs[3..6].copy_from_slice(&q);
        inputs[6] = r[0];
        let out = tape.eval_vec(&inputs).unwrap();
        for (e, v) in exprs.iter().zip(out) {
            assert_eq!(e.eval(&Env::new(&q, &r)).unwrap(), v);
        }
    }

    #[test]
    fn common_subexpressions_are_shared() {
        let a = parse("sin(x1*x2) + sin(x1*x2)", 2, 0).unwrap();
        let tape = Tape::compile(&[a], Layout::new(2, 0));
        // x1, x2, x1*x2, sin, add
        assert_eq!(tape.n_ops(), 5);
    }

    #[test]
    fn domain_errors_surface() {
        let e = parse("1/(x1-1)", 1, 0).unwrap();
        let tape = Tape::compile(&[e], Layout::new(1, 0));
        assert_eq!(tape.eval_vec(&[0.0, 1.0]), Err(EvalError::DivisionByZero));
    }
}
