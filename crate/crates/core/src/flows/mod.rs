//! Hamiltonian flows on `T*R^n` with dense output and variational equations.

mod rk;

use nalgebra::DMatrix;

use crate::geometry::{tape_inputs, AffineSystem, CotangentPoint};
use crate::symexpr::{Expr, Layout, Tape, Var};
use crate::{Error, Result};

pub use rk::{integrate_ode, DenseOutput, IntegratorOptions};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FieldKind {
    /// `F0 + u F1` with `u = +-1`.
    Bang { u: f64 },
    /// `F0 - (F001 / F101) F1`, evaluable only where `F101 > tol_sglc`.
    Singular,
    /// Any other Hamiltonian.
    Lift,
}

/// A compiled Hamiltonian `H(p, q, r)` with its vector field
/// `->H = (-dH/dq, dH/dp)`, the linearisation `D->H` and `d->H/dr`.
#[derive(Clone, Debug)]
pub struct HamiltonianField {
    kind: FieldKind,
    n: usize,
    m: usize,
    hamiltonian: Expr,
    has_guard: bool,
    tol_sglc: f64,
    tape_value: Tape,
    tape_field: Tape,
    tape_var: Tape,
}

impl HamiltonianField {
    pub fn bang(sys: &AffineSystem, u: f64) -> Result<Self> {
        if u != 1.0 && u != -1.0 {
            return Err(Error::Validation(format!("bang control must be +1 or -1, got {u}")));
        }
        Ok(Self::build(FieldKind::Bang { u }, sys.bang_hamiltonian(u), None, sys))
    }

    pub fn singular(sys: &AffineSystem) -> Self {
        let guard = sys.lift_expr(crate::geometry::Lift::F101).clone();
        Self::build(FieldKind::Singular, sys.singular_hamiltonian(), Some(guard), sys)
    }

    /// Wraps an arbitrary Hamiltonian over `p1..pn`, `x1..xn`, `r1..rm`.
    pub fn from_hamiltonian(h: Expr, n: usize, m: usize) -> Result<Self> {
        let (xs, rs, ps) = h.var_extent();
        if xs > n || ps > n || rs > m {
            return Err(Error::Validation(format!("Hamiltonian `{h}` exceeds declared dimensions")));
        }
        Ok(Self::compile(FieldKind::Lift, h, None, n, m, 0.0))
    }

    fn build(kind: FieldKind, h: Expr, guard: Option<Expr>, sys: &AffineSystem) -> Self {
        Self::compile(kind, h, guard, sys.dim(), sys.n_param(), sys.tol_sglc())
    }

    fn compile(kind: FieldKind, h: Expr, guard: Option<Expr>, n: usize, m: usize, tol_sglc: f64) -> Self {
        let layout = Layout::new(n, m);
        let field = hamiltonian_field_exprs(&h, n);
        let mut head = Vec::new();
        let has_guard = guard.is_some();
        if let Some(g) = guard {
            head.push(g);
        }
        let mut outs_field = head.clone();
        outs_field.extend(field.iter().cloned());
        let mut outs_var = outs_field.clone();
        for fi in &field {
            for j in 0..2 * n {
                outs_var.push(fi.differentiate(cotangent_var(n, j)));
            }
        }
        for fi in &field {
            for k in 0..m {
                outs_var.push(fi.differentiate(Var::Param(k)));
            }
        }
        HamiltonianField {
            kind,
            n,
            m,
            tape_value: Tape::compile(std::slice::from_ref(&h), layout),
            tape_field: Tape::compile(&outs_field, layout),
            tape_var: Tape::compile(&outs_var, layout),
            hamiltonian: h,
            has_guard,
            tol_sglc,
        }
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_param(&self) -> usize {
        self.m
    }

    pub fn hamiltonian(&self) -> &Expr {
        &self.hamiltonian
    }

    fn check(&self, l: &CotangentPoint, r: &[f64]) -> Result<()> {
        if l.dim() != self.n {
            return Err(Error::DimensionMismatch {
                what: "cotangent point",
                expected: self.n,
                got: l.dim(),
            });
        }
        if r.len() != self.m {
            return Err(Error::DimensionMismatch {
                what: "parameter",
                expected: self.m,
                got: r.len(),
            });
        }
        Ok(())
    }

    pub fn value(&self, l: &CotangentPoint, r: &[f64]) -> Result<f64> {
        self.check(l, r)?;
        let v = self.tape_value.eval_vec(&tape_inputs(l.p.as_slice(), l.q.as_slice(), r))?;
        Ok(v[0])
    }

    /// `->H(l)`.
    pub fn eval(&self, l: &CotangentPoint, r: &[f64]) -> Result<CotangentPoint> {
        self.check(l, r)?;
        let mut out = vec![0.0; 2 * self.n];
        let mut ctx = EvalCtx::new(self, r);
        ctx.field(&l.to_flat(), &mut out)?;
        Ok(CotangentPoint::from_flat(&out))
    }

    /// `D->H(l)` as a `2n x 2n` matrix in `(p, q)` ordering.
    pub fn linearization(&self, l: &CotangentPoint, r: &[f64]) -> Result<DMatrix<f64>> {
        self.check(l, r)?;
        let mut ctx = EvalCtx::new(self, r);
        ctx.full(&l.to_flat())?;
        let n2 = 2 * self.n;
        let off = ctx.guard_off + n2;
        Ok(DMatrix::from_row_slice(n2, n2, &ctx.out[off..off + n2 * n2]))
    }

    fn guard(&self, g: f64) -> Result<()> {
        if self.has_guard && g <= self.tol_sglc {
            return Err(Error::SglcViolated {
                value: g,
                tol: self.tol_sglc,
            });
        }
        Ok(())
    }
}

/// Flat `(p, q)` index `j` as a symbolic variable.
pub(crate) fn cotangent_var(n: usize, j: usize) -> Var {
    if j < n {
        Var::Costate(j)
    } else {
        Var::State(j - n)
    }
}

/// Components of `->H = (-dH/dq, dH/dp)`.
pub(crate) fn hamiltonian_field_exprs(h: &Expr, n: usize) -> Vec<Expr> {
    (0..2 * n)
        .map(|i| {
            if i < n {
                h.differentiate(Var::State(i)).neg()
            } else {
                h.differentiate(Var::Costate(i - n))
            }
        })
        .collect()
}

/// Per-integration scratch space.
struct EvalCtx<'a> {
    h: &'a HamiltonianField,
    inputs: Vec<f64>,
    scratch: Vec<f64>,
    out: Vec<f64>,
    guard_off: usize,
}

impl<'a> EvalCtx<'a> {
    fn new(h: &'a HamiltonianField, r: &[f64]) -> Self {
        let n = h.n;
        let mut inputs = vec![0.0; 2 * n + h.m];
        inputs[2 * n..].copy_from_slice(r);
        let guard_off = usize::from(h.has_guard);
        let n_out = guard_off + 2 * n + 4 * n * n + 2 * n * h.m;
        EvalCtx {
            h,
            inputs,
            scratch: Vec::new(),
            out: vec![0.0; n_out],
            guard_off,
        }
    }

    fn field(&mut self, l: &[f64], dl: &mut [f64]) -> Result<()> {
        let n2 = 2 * self.h.n;
        self.inputs[..n2].copy_from_slice(&l[..n2]);
        let len = self.guard_off + n2;
        self.h.tape_field.eval(&self.inputs, &mut self.scratch, &mut self.out[..len])?;
        if self.h.has_guard {
            self.h.guard(self.out[0])?;
        }
        dl[..n2].copy_from_slice(&self.out[self.guard_off..len]);
        Ok(())
    }

    fn full(&mut self, l: &[f64]) -> Result<()> {
        let n2 = 2 * self.h.n;
        self.inputs[..n2].copy_from_slice(&l[..n2]);
        self.h.tape_var.eval(&self.inputs, &mut self.scratch, &mut self.out)?;
        if self.h.has_guard {
            self.h.guard(self.out[0])?;
        }
        Ok(())
    }

    /// Right-hand side of the augmented system `[l, Phi, Psi_r]`.
    fn variational(&mut self, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let n2 = 2 * self.h.n;
        let m = self.h.m;
        self.full(y)?;
        let g = self.guard_off;
        dy[..n2].copy_from_slice(&self.out[g..g + n2]);
        let jac = &self.out[g + n2..g + n2 + n2 * n2];
        let dr = &self.out[g + n2 + n2 * n2..];
        // Phi and Psi_r are stored column-major after l.
        let cols = n2 + m;
        for c in 0..cols {
            let col = &y[n2 + c * n2..n2 + (c + 1) * n2];
            let dcol = &mut dy[n2 + c * n2..n2 + (c + 1) * n2];
            for i in 0..n2 {
                let row = &jac[i * n2..(i + 1) * n2];
                let mut acc = 0.0;
                for j in 0..n2 {
                    acc += row[j] * col[j];
                }
                if c >= n2 {
                    acc += dr[i * m + (c - n2)];
                }
                dcol[i] = acc;
            }
        }
        Ok(())
    }
}

/// A solution arc of a Hamiltonian field, optionally carrying the transition
/// matrix `Phi(t)` (with `Phi(t0) = I`) and the parameter sensitivity
/// `Psi_r(t)` (with `Psi_r(t0) = 0`).
#[derive(Clone, Debug)]
pub struct FlowSegment {
    n: usize,
    m: usize,
    variational: bool,
    dense: DenseOutput,
}

impl FlowSegment {
    pub fn t0(&self) -> f64 {
        self.dense.t0()
    }

    pub fn t1(&self) -> f64 {
        self.dense.t1()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn has_variational(&self) -> bool {
        self.variational
    }

    pub fn dense(&self) -> &DenseOutput {
        &self.dense
    }

    pub fn error_estimate(&self) -> f64 {
        self.dense.error_estimate()
    }

    pub fn point(&self, t: f64) -> CotangentPoint {
        let y = self.dense.eval(t);
        CotangentPoint::from_flat(&y[..2 * self.n])
    }

    pub fn start_point(&self) -> CotangentPoint {
        CotangentPoint::from_flat(&self.dense.start()[..2 * self.n])
    }

    pub fn end_point(&self) -> CotangentPoint {
        CotangentPoint::from_flat(&self.dense.end()[..2 * self.n])
    }

    fn blocks(&self, y: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        assert!(self.variational, "segment was integrated without variational equations");
        let n2 = 2 * self.n;
        let phi = DMatrix::from_column_slice(n2, n2, &y[n2..n2 + n2 * n2]);
        let psi = DMatrix::from_column_slice(n2, self.m, &y[n2 + n2 * n2..]);
        (phi, psi)
    }

    /// `(Phi(t), Psi_r(t))`. Panics on a segment without variational data.
    pub fn variation_at(&self, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        self.blocks(&self.dense.eval(t))
    }

    pub fn end_variation(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        self.blocks(self.dense.end())
    }
}

fn check_inputs(h: &HamiltonianField, l0: &CotangentPoint, r: &[f64]) -> Result<()> {
    h.check(l0, r)?;
    if !l0.is_finite() {
        return Err(Error::Validation("initial cotangent point is not finite".into()));
    }
    Ok(())
}

/// Flow of `->H` from `l0` at `t0` to `t1` (backward if `t1 < t0`).
pub fn integrate(h: &HamiltonianField, l0: &CotangentPoint, t0: f64, t1: f64, r: &[f64], opts: &IntegratorOptions) -> Result<FlowSegment> {
    check_inputs(h, l0, r)?;
    let mut ctx = EvalCtx::new(h, r);
    let dense = integrate_ode(|_, y, dy| ctx.field(y, dy), t0, t1, &l0.to_flat(), opts)?;
    Ok(FlowSegment {
        n: h.n,
        m: h.m,
        variational: false,
        dense,
    })
}

/// Flow together with `Phi' = D->H Phi` and `Psi_r' = D->H Psi_r + d->H/dr`.
pub fn variational(
    h: &HamiltonianField,
    l0: &CotangentPoint,
    t0: f64,
    t1: f64,
    r: &[f64],
    opts: &IntegratorOptions,
) -> Result<FlowSegment> {
    check_inputs(h, l0, r)?;
    let n2 = 2 * h.n;
    let mut y0 = l0.to_flat();
    y0.resize(n2 + n2 * n2 + n2 * h.m, 0.0);
    for i in 0..n2 {
        y0[n2 + i * n2 + i] = 1.0;
    }
    let mut ctx = EvalCtx::new(h, r);
    let dense = integrate_ode(|_, y, dy| ctx.variational(y, dy), t0, t1, &y0, opts)?;
    Ok(FlowSegment {
        n: h.n,
        m: h.m,
        variational: true,
        dense,
    })
}

/// Canonical symplectic matrix `J = [[0, -I], [I, 0]]` in `(p, q)` order, so
/// that `->H = J grad H`.
pub fn symplectic_matrix(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = -1.0;
        j[(n + i, i)] = 1.0;
    }
    j
}

/// `|Phi^T J Phi - J|` (Frobenius); zero for an exact Hamiltonian flow.
pub fn symplectic_defect(phi: &DMatrix<f64>) -> f64 {
    let n = phi.nrows() / 2;
    let j = symplectic_matrix(n);
    (phi.transpose() * &j * phi - j).norm()
}
