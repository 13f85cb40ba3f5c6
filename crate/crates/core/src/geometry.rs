//! Vector fields on R^n, Lie brackets, Hamiltonian lifts to T*R^n and the
//! singular feedback of a control-affine pair `(f0, f1)`.
//!
//! Bracket convention: `[f, g](q) = Dg(q) f(q) - Df(q) g(q)`. With
//! `F(p, q) = <p, f(q)>` and `->F = (-p Df, f)` this gives
//! `{F, G} = dG . ->F = <p, [f, g]>`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::symexpr::{parse, Expr, Layout, Tape, Var};
use crate::{Error, Result};

pub const DEFAULT_TOL_SGLC: f64 = 1e-9;

/// A point `l = (p, q)` of the cotangent bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct CotangentPoint {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl CotangentPoint {
    pub fn new(p: DVector<f64>, q: DVector<f64>) -> Self {
        assert_eq!(p.len(), q.len(), "covector and state dimensions differ");
        CotangentPoint { p, q }
    }

    pub fn from_slices(p: &[f64], q: &[f64]) -> Self {
        CotangentPoint::new(DVector::from_column_slice(p), DVector::from_column_slice(q))
    }

    /// Splits a flat `[p, q]` vector.
    pub fn from_flat(flat: &[f64]) -> Self {
        let n = flat.len() / 2;
        CotangentPoint::from_slices(&flat[..n], &flat[n..2 * n])
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.p.iter().chain(self.q.iter()).copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.q.iter()).all(|v| v.is_finite())
    }
}

/// Tape input vector `[p, q, r]`.
pub(crate) fn tape_inputs(p: &[f64], q: &[f64], r: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(p.len() + q.len() + r.len());
    v.extend_from_slice(p);
    v.extend_from_slice(q);
    v.extend_from_slice(r);
    v
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}

/// A vector field `q -> f(q, r)` with exact symbolic derivatives.
#[derive(Clone, Debug)]
pub struct VectorField {
    n: usize,
    m: usize,
    comps: Vec<Expr>,
    jac: Vec<Vec<Expr>>,
    tape_f: Tape,
    tape_jac: Tape,
    tape_d2: OnceLock<Tape>,
}

impl VectorField {
    /// Builds a field from its components. Components may reference
    /// `x1..xn` and `r1..rm` but no costates.
    pub fn new(comps: Vec<Expr>, n_param: usize) -> Result<Self> {
        let n = comps.len();
        if n == 0 {
            return Err(Error::Validation("vector field has no components".into()));
        }
        for c in &comps {
            let (xs, rs, ps) = c.var_extent();
            if xs > n || rs > n_param || ps > 0 {
                return Err(Error::Validation(format!(
                    "component `{c}` references variables outside x1..x{n}, r1..r{n_param}"
                )));
            }
        }
        let jac: Vec<Vec<Expr>> = comps
            .iter()
            .map(|c| (0..n).map(|j| c.differentiate(Var::State(j))).collect())
            .collect();
        let layout = Layout::new(n, n_param);
        let tape_f = Tape::compile(&comps, layout);
        let flat: Vec<Expr> = jac.iter().flatten().cloned().collect();
        let tape_jac = Tape::compile(&flat, layout);
        Ok(VectorField {
            n,
            m: n_param,
            comps,
            jac,
            tape_f,
            tape_jac,
            tape_d2: OnceLock::new(),
        })
    }

    pub fn parse(comps: &[&str], n_param: usize) -> Result<Self> {
        let n = comps.len();
        let exprs = comps
            .iter()
            .map(|s| parse(s, n, n_param))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        VectorField::new(exprs, n_param)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_param(&self) -> usize {
        self.m
    }

    pub fn components(&self) -> &[Expr] {
        &self.comps
    }

    /// `jacobian_exprs()[i][j] = d f_i / d x_j`.
    pub fn jacobian_exprs(&self) -> &[Vec<Expr>] {
        &self.jac
    }

    fn inputs(&self, q: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        check_len("state", self.n, q.len())?;
        check_len("parameter", self.m, r.len())?;
        Ok(tape_inputs(&vec![0.0; self.n], q, r))
    }

    pub fn eval(&self, q: &[f64], r: &[f64]) -> Result<DVector<f64>> {
        let inputs = self.inputs(q, r)?;
        Ok(DVector::from_vec(self.tape_f.eval_vec(&inputs)?))
    }

    pub fn jacobian(&self, q: &[f64], r: &[f64]) -> Result<DMatrix<f64>> {
        let inputs = self.inputs(q, r)?;
        let flat = self.tape_jac.eval_vec(&inputs)?;
        Ok(DMatrix::from_row_slice(self.n, self.n, &flat))
    }

    /// `sum_jk d^2 f_i / dx_j dx_k v_j w_k`.
    pub fn second_derivative(&self, q: &[f64], r: &[f64], v: &[f64], w: &[f64]) -> Result<DVector<f64>> {
        check_len("direction", self.n, v.len())?;
        check_len("direction", self.n, w.len())?;
        let n = self.n;
        let tape = self.tape_d2.get_or_init(|| {
            let mut flat = Vec::with_capacity(n * n * n);
            for row in &self.jac {
                for d in row {
                    for k in 0..n {
                        flat.push(d.differentiate(Var::State(k)));
                    }
                }
            }
            Tape::compile(&flat, Layout::new(n, self.m))
        });
        let h = tape.eval_vec(&self.inputs(q, r)?)?;
        let mut out = DVector::zeros(n);
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                for k in 0..n {
                    s += h[(i * n + j) * n + k] * v[j] * w[k];
                }
            }
            out[i] = s;
        }
        Ok(out)
    }

    /// Symbolic lift `F(p, q) = <p, f(q)>`.
    pub fn lift(&self) -> Expr {
        let mut acc = Expr::zero();
        for (i, c) in self.comps.iter().enumerate() {
            acc = acc.add(&Expr::costate(i).mul(c));
        }
        acc
    }
}

pub fn lie_bracket(f: &VectorField, g: &VectorField) -> Result<VectorField> {
    check_len("bracket operand", f.n, g.n)?;
    let n = f.n;
    let m = f.m.max(g.m);
    let mut comps = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = Expr::zero();
        for j in 0..n {
            acc = acc.add(&g.jac[i][j].mul(&f.comps[j]));
            acc = acc.sub(&f.jac[i][j].mul(&g.comps[j]));
        }
        comps.push(acc);
    }
    VectorField::new(comps, m)
}

/// The brackets entering the singular-arc analysis.
#[derive(Clone, Debug)]
pub struct BracketSet {
    pub f01: VectorField,
    pub f001: VectorField,
    pub f101: VectorField,
}

pub fn iterated_brackets(f0: &VectorField, f1: &VectorField) -> Result<BracketSet> {
    let f01 = lie_bracket(f0, f1)?;
    let f001 = lie_bracket(f0, &f01)?;
    let f101 = lie_bracket(f1, &f01)?;
    Ok(BracketSet { f01, f001, f101 })
}

/// Lift of a vector field to `T*R^n`.
#[derive(Clone, Copy, Debug)]
pub struct LiftedHamiltonian<'a> {
    pub field: &'a VectorField,
}

impl<'a> LiftedHamiltonian<'a> {
    pub fn new(field: &'a VectorField) -> Self {
        LiftedHamiltonian { field }
    }

    pub fn value(&self, l: &CotangentPoint, r: &[f64]) -> Result<f64> {
        let f = self.field.eval(l.q.as_slice(), r)?;
        check_len("covector", self.field.n, l.p.len())?;
        Ok(l.p.dot(&f))
    }

    /// `->F(l) = (-p Df(q), f(q))`. The state part is the field value itself.
    pub fn vector_field(&self, l: &CotangentPoint, r: &[f64]) -> Result<CotangentPoint> {
        check_len("covector", self.field.n, l.p.len())?;
        let f = self.field.eval(l.q.as_slice(), r)?;
        let df = self.field.jacobian(l.q.as_slice(), r)?;
        let dp = -(df.transpose() * &l.p);
        Ok(CotangentPoint { p: dp, q: f })
    }

    /// `(dF/dp, dF/dq) = (f(q), p Df(q))`.
    pub fn differential(&self, l: &CotangentPoint, r: &[f64]) -> Result<CotangentPoint> {
        let f = self.field.eval(l.q.as_slice(), r)?;
        let df = self.field.jacobian(l.q.as_slice(), r)?;
        Ok(CotangentPoint {
            p: f,
            q: df.transpose() * &l.p,
        })
    }
}

/// `{F, G}(l) = dG(l) . ->F(l)`, computed from first derivatives only.
pub fn poisson(f: &LiftedHamiltonian<'_>, g: &LiftedHamiltonian<'_>, l: &CotangentPoint, r: &[f64]) -> Result<f64> {
    check_len("poisson operand", f.field.n, g.field.n)?;
    let vf = f.vector_field(l, r)?;
    let dg = g.differential(l, r)?;
    Ok(dg.p.dot(&vf.p) + dg.q.dot(&vf.q))
}

/// Values of the five lifts used throughout, at one point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftValues {
    pub f0: f64,
    pub f1: f64,
    pub f01: f64,
    pub f001: f64,
    pub f101: f64,
}

/// Indices into the lift list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lift {
    F0 = 0,
    F1 = 1,
    F01 = 2,
    F001 = 3,
    F101 = 4,
}

/// Value and gradients of one lift at a point.
#[derive(Clone, Debug)]
pub struct LiftGradient {
    pub value: f64,
    /// Gradient in flat `(p, q)` order.
    pub d_l: DVector<f64>,
    pub d_r: DVector<f64>,
}

/// A control-affine pair `(f0, f1)` with its brackets and compiled lifts.
#[derive(Clone, Debug)]
pub struct AffineSystem {
    n: usize,
    m: usize,
    pub f0: VectorField,
    pub f1: VectorField,
    pub brackets: BracketSet,
    lifts: [Expr; 5],
    tape_lifts: Tape,
    tape_grads: Tape,
    tol_sglc: f64,
}

impl AffineSystem {
    pub fn new(f0: VectorField, f1: VectorField) -> Result<Self> {
        check_len("f1 components", f0.dim(), f1.dim())?;
        let n = f0.dim();
        let m = f0.n_param().max(f1.n_param());
        let f0 = VectorField::new(f0.comps, m)?;
        let f1 = VectorField::new(f1.comps, m)?;
        let brackets = iterated_brackets(&f0, &f1)?;
        let lifts = [
            f0.lift(),
            f1.lift(),
            brackets.f01.lift(),
            brackets.f001.lift(),
            brackets.f101.lift(),
        ];
        let layout = Layout::new(n, m);
        let tape_lifts = Tape::compile(&lifts, layout);
        let mut grads = Vec::new();
        for h in &lifts {
            grads.push(h.clone());
            for i in 0..n {
                grads.push(h.differentiate(Var::Costate(i)));
            }
            for i in 0..n {
                grads.push(h.differentiate(Var::State(i)));
            }
            for k in 0..m {
                grads.push(h.differentiate(Var::Param(k)));
            }
        }
        let tape_grads = Tape::compile(&grads, layout);
        Ok(AffineSystem {
            n,
            m,
            f0,
            f1,
            brackets,
            lifts,
            tape_lifts,
            tape_grads,
            tol_sglc: DEFAULT_TOL_SGLC,
        })
    }

    pub fn parse(f0: &[&str], f1: &[&str], n_param: usize) -> Result<Self> {
        AffineSystem::new(VectorField::parse(f0, n_param)?, VectorField::parse(f1, n_param)?)
    }

    pub fn with_tol_sglc(mut self, tol: f64) -> Self {
        self.tol_sglc = tol;
        self
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_param(&self) -> usize {
        self.m
    }

    pub fn tol_sglc(&self) -> f64 {
        self.tol_sglc
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.n, self.m)
    }

    pub fn lift_expr(&self, which: Lift) -> &Expr {
        &self.lifts[which as usize]
    }

    /// The singular Hamiltonian `F0 - (F001 / F101) F1`.
    pub fn singular_hamiltonian(&self) -> Expr {
        let [f0, f1, _, f001, f101] = &self.lifts;
        f0.sub(&f001.div(f101).mul(f1))
    }

    /// The bang Hamiltonian `F0 + u F1`.
    pub fn bang_hamiltonian(&self, u: f64) -> Expr {
        self.lifts[0].add(&Expr::constant(u).mul(&self.lifts[1]))
    }

    fn check_point(&self, l: &CotangentPoint, r: &[f64]) -> Result<()> {
        check_len("covector", self.n, l.p.len())?;
        check_len("state", self.n, l.q.len())?;
        check_len("parameter", self.m, r.len())
    }

    pub fn lift_values(&self, l: &CotangentPoint, r: &[f64]) -> Result<LiftValues> {
        self.check_point(l, r)?;
        let v = self.tape_lifts.eval_vec(&tape_inputs(l.p.as_slice(), l.q.as_slice(), r))?;
        Ok(LiftValues {
            f0: v[0],
            f1: v[1],
            f01: v[2],
            f001: v[3],
            f101: v[4],
        })
    }

    /// Values and gradients of all five lifts, indexed by [`Lift`].
    pub fn lift_gradients(&self, l: &CotangentPoint, r: &[f64]) -> Result<Vec<LiftGradient>> {
        self.check_point(l, r)?;
        let v = self.tape_grads.eval_vec(&tape_inputs(l.p.as_slice(), l.q.as_slice(), r))?;
        let stride = 1 + 2 * self.n + self.m;
        Ok((0..5)
            .map(|k| {
                let s = &v[k * stride..(k + 1) * stride];
                LiftGradient {
                    value: s[0],
                    d_l: DVector::from_column_slice(&s[1..1 + 2 * self.n]),
                    d_r: DVector::from_column_slice(&s[1 + 2 * self.n..]),
                }
            })
            .collect())
    }

    /// Singular feedback `v = -F001 / F101`.
    pub fn singular_control(&self, l: &CotangentPoint, r: &[f64]) -> Result<f64> {
        let lv = self.lift_values(l, r)?;
        if lv.f101 <= self.tol_sglc {
            return Err(Error::SglcViolated {
                value: lv.f101,
                tol: self.tol_sglc,
            });
        }
        Ok(-lv.f001 / lv.f101)
    }

    /// `|F1(l)| <= tol`.
    pub fn on_sigma(&self, l: &CotangentPoint, r: &[f64], tol: f64) -> Result<bool> {
        Ok(self.lift_values(l, r)?.f1.abs() <= tol)
    }

    /// `|F1| <= tol`, `|F01| <= tol` and `F101 > tol`.
    pub fn on_s(&self, l: &CotangentPoint, r: &[f64], tol: f64) -> Result<bool> {
        let lv = self.lift_values(l, r)?;
        Ok(lv.f1.abs() <= tol && lv.f01.abs() <= tol && lv.f101 > tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn dubins() -> AffineSystem {
        AffineSystem::parse(&["cos(x3)+r1", "sin(x3)+r2", "0"], &["0", "0", "1"], 2).unwrap()
    }

    fn close(a: &DVector<f64>, b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn dubins_brackets() {
        let sys = dubins();
        let r = [0.0, 0.0];
        for th in [0.0, 0.3, 1.2, -2.0] {
            let q = [0.4, -1.0, th];
            let f01 = sys.brackets.f01.eval(&q, &r).unwrap();
            assert!(close(&f01, &[th.sin(), -th.cos(), 0.0], 1e-15));
            let f101 = sys.brackets.f101.eval(&q, &r).unwrap();
            assert!(close(&f101, &[th.cos(), th.sin(), 0.0], 1e-15));
            let f001 = sys.brackets.f001.eval(&q, &r).unwrap();
            assert!(close(&f001, &[0.0; 3], 0.0));
        }
    }

    #[test]
    fn drift_leaves_f01_unchanged() {
        let sys = dubins();
        let q = [1.0, 2.0, 0.7];
        let a = sys.brackets.f01.eval(&q, &[0.0, 0.0]).unwrap();
        let b = sys.brackets.f01.eval(&q, &[0.05, -0.02]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_bracket_vanishes() {
        let f = VectorField::parse(&["x2*x1", "sin(x1)"], 0).unwrap();
        let ff = lie_bracket(&f, &f).unwrap();
        let v = ff.eval(&[0.3, -0.8], &[]).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn linear_system_bracket() {
        // f0 = A q with A = [[1,2],[3,4]], f1 = (5, 6)
        let f0 = VectorField::parse(&["x1+2*x2", "3*x1+4*x2"], 0).unwrap();
        let f1 = VectorField::parse(&["5", "6"], 0).unwrap();
        let b = lie_bracket(&f0, &f1).unwrap().eval(&[0.1, 0.2], &[]).unwrap();
        assert!(close(&b, &[-17.0, -39.0], 1e-12));
    }

    #[test]
    fn poisson_on_dubins() {
        let sys = dubins();
        let l = CotangentPoint::from_slices(&[1.0, 0.0, -1.0], &[0.0, 0.0, FRAC_PI_2]);
        let f0 = LiftedHamiltonian::new(&sys.f0);
        let f1 = LiftedHamiltonian::new(&sys.f1);
        let v = poisson(&f0, &f1, &l, &[0.0, 0.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(poisson(&f0, &f0, &l, &[0.0, 0.0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn singular_control_and_membership() {
        let sys = dubins();
        let r = [0.0, 0.0];
        let l = CotangentPoint::from_slices(&[1.0, 0.0, 0.0], &[5.0, 1.0, 0.0]);
        assert_eq!(sys.singular_control(&l, &r).unwrap(), 0.0);
        assert!(sys.on_s(&l, &r, 1e-12).unwrap());
        let l = CotangentPoint::from_slices(&[1.0, 0.0, 1.0], &[5.0, 1.0, 0.0]);
        assert!(!sys.on_sigma(&l, &r, 1e-12).unwrap());
        let l = CotangentPoint::from_slices(&[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0]);
        assert!(sys.on_sigma(&l, &r, 1e-12).unwrap());
        assert!(!sys.on_s(&l, &r, 1e-12).unwrap());
        assert!(matches!(sys.singular_control(&l, &r), Err(Error::SglcViolated { .. })));
        let drifted = [0.03, -0.01];
        let l = CotangentPoint::from_slices(&[1.0, 0.2, 0.0], &[5.0, 1.0, 0.1]);
        assert_eq!(sys.singular_control(&l, &drifted).unwrap(), 0.0);
    }

    #[test]
    fn lift_state_part_is_field_value() {
        let sys = dubins();
        let l = CotangentPoint::from_slices(&[0.3, -0.2, 0.9], &[1.0, 2.0, 0.4]);
        let r = [0.01, 0.02];
        let vf = LiftedHamiltonian::new(&sys.f0).vector_field(&l, &r).unwrap();
        assert_eq!(vf.q, sys.f0.eval(l.q.as_slice(), &r).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let f = VectorField::parse(&["x1", "x2"], 0).unwrap();
        let g = VectorField::parse(&["x1"], 0).unwrap();
        assert!(matches!(lie_bracket(&f, &g), Err(Error::DimensionMismatch { .. })));
    }
}
