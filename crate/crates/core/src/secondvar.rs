//! Extended second variation on the singular arc.
//!
//! Everything is pulled back to `x1 = xi(tau1)` along the linearised
//! reference flow. With `A(t)` the transition matrix of the open-loop field
//! `->F0 + u(t) ->F1` (`u` frozen at the singular feedback) and
//! `d(t) = dF01(l(t)) A(t) = (g(t), k(t))`:
//!
//! * `g(t)` is the dragged bracket `S_t^-1 f01(xi(t))`,
//! * `c(t) = -k(t)` is the functional paired with `zeta` in the cost,
//! * `R(t) = F101(l(t))`.
//!
//! The accessory problem is `min 1/2 eps' Q eps + 1/2 int (R w^2 + 2 w c.zeta)`
//! subject to `zeta' = w g`, `zeta(tau1) = eps0 f0(x1) + eps1 f1(x1)`,
//! `zeta(tau2) = 0`, with `Q_ij = -sym <mu1, Df_i(x1) f_j(x1)>`. Its
//! Hamiltonian is `G = (1/2R) (d . (omega, zeta))^2` and the boundary
//! Lagrangian plane at `tau1` is spanned by `->F0(l1)`, `->F1(l1)` and
//! `(omega, 0)` with `omega` orthogonal to `f0(x1)`, `f1(x1)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::extremal::{grid, BsbExtremal, CompiledProblem};
use crate::flows::{cotangent_var, hamiltonian_field_exprs, integrate_ode, symplectic_matrix, DenseOutput, IntegratorOptions};
use crate::geometry::{tape_inputs, AffineSystem, CotangentPoint, Lift};
use crate::symexpr::{Expr, Tape};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecondVarOptions {
    /// Piecewise-constant intervals in the QP test (checked against twice as many).
    pub n_intervals: usize,
    /// QP coercivity threshold, relative to `max R`.
    pub eig_tol: f64,
    /// Hamiltonian-test threshold on the relative smallest singular value.
    pub kernel_tol: f64,
    /// Initial exclusion of the Hamiltonian test as a fraction of the arc.
    pub delta0_frac: f64,
    pub rank_tol: f64,
    /// Samples of `g(t)` in the controllability matrix.
    pub n_samples: usize,
    /// Monitoring grid of the Hamiltonian test.
    pub monitor_samples: usize,
    /// Accepted relative change of the QP eigenvalue between `N` and `2N`.
    pub richardson_tol: f64,
    pub integrator: IntegratorOptions,
}

impl Default for SecondVarOptions {
    fn default() -> Self {
        SecondVarOptions {
            n_intervals: 128,
            eig_tol: 1e-7,
            kernel_tol: 1e-7,
            delta0_frac: 1e-4,
            rank_tol: 1e-8,
            n_samples: 64,
            monitor_samples: 2048,
            richardson_tol: 0.1,
            integrator: IntegratorOptions::with_tol(1e-11),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum CoercivityVerdict {
    Coercive,
    /// `t_star` locates the failure when the test can (Hamiltonian test only).
    NotCoercive {
        t_star: Option<f64>,
    },
    Marginal {
        t_star: Option<f64>,
    },
    Failed {
        reason: String,
    },
}

impl CoercivityVerdict {
    pub fn is_coercive(&self) -> bool {
        matches!(self, CoercivityVerdict::Coercive)
    }
}

/// Data of the singular arc at one time.
#[derive(Clone, Debug)]
pub struct ArcSample {
    pub l: CotangentPoint,
    pub r: f64,
    pub g: DVector<f64>,
    pub c: DVector<f64>,
    /// Linearised state flow `S_t`.
    pub s: DMatrix<f64>,
}

/// Dense reference data on `[tau1, tau2]`.
#[derive(Clone, Debug)]
pub struct SingularArcData {
    n: usize,
    r: Vec<f64>,
    tau1: f64,
    tau2: f64,
    l1: CotangentPoint,
    f0_x1: DVector<f64>,
    f1_x1: DVector<f64>,
    q_boundary: DMatrix<f64>,
    f0_field: CotangentPoint,
    f1_field: CotangentPoint,
    tol_sglc: f64,
    tape: Tape,
    dense: Option<DenseOutput>,
}

// Tape output layout.
const OFF_F001: usize = 0;
const OFF_F101: usize = 1;
const OFF_GRAD: usize = 2;

struct Offsets {
    vf0: usize,
    vf1: usize,
    jac0: usize,
    jac1: usize,
}

fn offsets(n: usize) -> Offsets {
    let n2 = 2 * n;
    let vf0 = OFF_GRAD + n2;
    let vf1 = vf0 + n2;
    let jac0 = vf1 + n2;
    let jac1 = jac0 + n2 * n2;
    Offsets { vf0, vf1, jac0, jac1 }
}

fn compile_tape(sys: &AffineSystem) -> Tape {
    let n = sys.dim();
    let mut outs: Vec<Expr> = vec![sys.lift_expr(Lift::F001).clone(), sys.lift_expr(Lift::F101).clone()];
    let f01 = sys.lift_expr(Lift::F01);
    outs.extend((0..2 * n).map(|j| f01.differentiate(cotangent_var(n, j))));
    let v0 = hamiltonian_field_exprs(sys.lift_expr(Lift::F0), n);
    let v1 = hamiltonian_field_exprs(sys.lift_expr(Lift::F1), n);
    outs.extend(v0.iter().cloned());
    outs.extend(v1.iter().cloned());
    for v in [&v0, &v1] {
        for e in v.iter() {
            outs.extend((0..2 * n).map(|j| e.differentiate(cotangent_var(n, j))));
        }
    }
    Tape::compile(&outs, sys.layout())
}

/// Builds the arc data from an assembled extremal.
pub fn build_singular_arc_data(ext: &BsbExtremal, prob: &CompiledProblem, opts: &SecondVarOptions) -> Result<SingularArcData> {
    singular_arc_from_point(
        &prob.system,
        &ext.r,
        &ext.first_junction(),
        ext.structure.tau1,
        ext.structure.tau2,
        opts,
    )
}

/// Builds the arc data for the singular arc starting at `l1` (which should
/// lie on `S`) and lasting `tau2 - tau1`.
pub fn singular_arc_from_point(
    sys: &AffineSystem,
    r: &[f64],
    l1: &CotangentPoint,
    tau1: f64,
    tau2: f64,
    opts: &SecondVarOptions,
) -> Result<SingularArcData> {
    let n = sys.dim();
    if l1.dim() != n {
        return Err(Error::DimensionMismatch {
            what: "cotangent point",
            expected: n,
            got: l1.dim(),
        });
    }
    if r.len() != sys.n_param() {
        return Err(Error::DimensionMismatch {
            what: "parameter",
            expected: sys.n_param(),
            got: r.len(),
        });
    }
    if tau2 < tau1 || !tau1.is_finite() || !tau2.is_finite() {
        return Err(Error::InvalidStructure(format!("singular arc [{tau1}, {tau2}] is empty")));
    }
    let q1 = l1.q.as_slice();
    let f0_x1 = sys.f0.eval(q1, r)?;
    let f1_x1 = sys.f1.eval(q1, r)?;
    let mu = &l1.p;
    let fs = [&f0_x1, &f1_x1];
    let jacs = [sys.f0.jacobian(q1, r)?, sys.f1.jacobian(q1, r)?];
    let mut q_boundary = DMatrix::zeros(2, 2);
    for i in 0..2 {
        for j in 0..2 {
            let a = mu.dot(&(&jacs[i] * fs[j]));
            let b = mu.dot(&(&jacs[j] * fs[i]));
            q_boundary[(i, j)] = -0.5 * (a + b);
        }
    }
    let tape = compile_tape(sys);
    let mut data = SingularArcData {
        n,
        r: r.to_vec(),
        tau1,
        tau2,
        l1: l1.clone(),
        f0_x1,
        f1_x1,
        q_boundary,
        f0_field: l1.clone(),
        f1_field: l1.clone(),
        tol_sglc: sys.tol_sglc(),
        tape,
        dense: None,
    };
    let out = data.eval_tape(l1)?;
    let off = offsets(n);
    data.f0_field = CotangentPoint::from_flat(&out[off.vf0..off.vf0 + 2 * n]);
    data.f1_field = CotangentPoint::from_flat(&out[off.vf1..off.vf1 + 2 * n]);
    data.check_sglc(out[OFF_F101])?;

    if tau2 > tau1 {
        let n2 = 2 * n;
        let mut y0 = l1.to_flat();
        let mut eye = vec![0.0; n2 * n2];
        for i in 0..n2 {
            eye[i * n2 + i] = 1.0;
        }
        y0.extend(eye);
        let mut scratch = Vec::new();
        let mut buf = vec![0.0; data.tape.n_outputs()];
        let mut inputs = vec![0.0; n2 + r.len()];
        inputs[n2..].copy_from_slice(r);
        let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
            inputs[..n2].copy_from_slice(&y[..n2]);
            data.tape.eval(&inputs, &mut scratch, &mut buf)?;
            data.check_sglc(buf[OFF_F101])?;
            let v = -buf[OFF_F001] / buf[OFF_F101];
            for i in 0..n2 {
                dy[i] = buf[off.vf0 + i] + v * buf[off.vf1 + i];
            }
            for c in 0..n2 {
                let col = &y[n2 + c * n2..n2 + (c + 1) * n2];
                for i in 0..n2 {
                    let j0 = &buf[off.jac0 + i * n2..off.jac0 + (i + 1) * n2];
                    let j1 = &buf[off.jac1 + i * n2..off.jac1 + (i + 1) * n2];
                    let mut acc = 0.0;
                    for j in 0..n2 {
                        acc += (j0[j] + v * j1[j]) * col[j];
                    }
                    dy[n2 + c * n2 + i] = acc;
                }
            }
            Ok(())
        };
        let dense = integrate_ode(rhs, tau1, tau2, &y0, &opts.integrator)?;
        data.dense = Some(dense);
    }
    Ok(data)
}

impl SingularArcData {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn tau1(&self) -> f64 {
        self.tau1
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }

    pub fn length(&self) -> f64 {
        self.tau2 - self.tau1
    }

    pub fn l1(&self) -> &CotangentPoint {
        &self.l1
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    /// `[f0(x1) | f1(x1)]`.
    pub fn boundary_fields(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&[self.f0_x1.clone(), self.f1_x1.clone()])
    }

    /// Boundary form `Q` on `(eps0, eps1)`.
    pub fn q_boundary(&self) -> &DMatrix<f64> {
        &self.q_boundary
    }

    fn check_sglc(&self, f101: f64) -> Result<()> {
        if !(f101 > self.tol_sglc) {
            return Err(Error::SglcViolated {
                value: f101,
                tol: self.tol_sglc,
            });
        }
        Ok(())
    }

    fn eval_tape(&self, l: &CotangentPoint) -> Result<Vec<f64>> {
        Ok(self.tape.eval_vec(&tape_inputs(l.p.as_slice(), l.q.as_slice(), &self.r))?)
    }

    /// Reference data at `t`, clamped to the arc.
    pub fn sample(&self, t: f64) -> Result<ArcSample> {
        let n = self.n;
        let n2 = 2 * n;
        let (l, a) = match &self.dense {
            Some(d) => {
                let y = d.eval(t);
                (CotangentPoint::from_flat(&y[..n2]), DMatrix::from_column_slice(n2, n2, &y[n2..]))
            }
            None => (self.l1.clone(), DMatrix::identity(n2, n2)),
        };
        let out = self.eval_tape(&l)?;
        let r = out[OFF_F101];
        self.check_sglc(r)?;
        let grad = DVector::from_column_slice(&out[OFF_GRAD..OFF_GRAD + n2]);
        let d = a.tr_mul(&grad);
        Ok(ArcSample {
            l,
            r,
            g: d.rows(0, n).into_owned(),
            c: -d.rows(n, n).into_owned(),
            s: a.view((n, n), (n, n)).into_owned(),
        })
    }
}

/// Basis of the boundary Lagrangian plane at `l1`.
#[derive(Clone, Debug)]
pub struct LagrangianFrame {
    /// `2n x n`, columns normalised.
    pub basis: DMatrix<f64>,
    /// `max |sigma(v_i, v_j)|` over basis pairs.
    pub isotropy_defect: f64,
}

impl LagrangianFrame {
    /// Rank of the state projection of the frame.
    pub fn projected_rank(&self, tol: f64) -> usize {
        let n = self.basis.ncols();
        self.basis.rows(n, n).into_owned().rank(tol)
    }
}

pub fn lagrangian_frame(data: &SingularArcData) -> LagrangianFrame {
    let n = data.n;
    let mut cols = vec![data.f0_field.to_flat(), data.f1_field.to_flat()];
    // Orthonormal complement of span{f0(x1), f1(x1)}.
    let mut basis: Vec<DVector<f64>> = Vec::new();
    gram_schmidt_push(&mut basis, data.f0_x1.clone());
    gram_schmidt_push(&mut basis, data.f1_x1.clone());
    let fixed = basis.len();
    for i in 0..n {
        if basis.len() == n {
            break;
        }
        gram_schmidt_push(&mut basis, DVector::from_fn(n, |j, _| f64::from(u8::from(i == j))));
    }
    for w in basis.iter().skip(fixed) {
        let mut c = w.as_slice().to_vec();
        c.extend(std::iter::repeat_n(0.0, n));
        cols.push(c);
    }
    let mut basis = DMatrix::from_fn(2 * n, cols.len(), |i, j| cols[j][i]);
    for mut c in basis.column_iter_mut() {
        let norm = c.norm();
        if norm > 0.0 {
            c /= norm;
        }
    }
    let j = symplectic_matrix(n);
    let omega = basis.transpose() * &j * &basis;
    let isotropy_defect = omega.amax();
    LagrangianFrame { basis, isotropy_defect }
}

fn gram_schmidt_push(basis: &mut Vec<DVector<f64>>, mut v: DVector<f64>) {
    let scale = v.norm();
    for _ in 0..2 {
        for b in basis.iter() {
            let c = b.dot(&v);
            v -= b * c;
        }
    }
    let norm = v.norm();
    if norm > 1e-8 * scale.max(1e-300) && norm > 0.0 {
        basis.push(v / norm);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianTest {
    pub verdict: CoercivityVerdict,
    /// Smallest `sigma_min(pi Q)`, `Q` an orthonormal basis of the flowed
    /// plane, once it has stopped rising out of the degeneracy at `tau1`.
    #[serde(with = "crate::problems_io::ext_float")]
    pub min_sigma: f64,
    pub t_min_sigma: f64,
    pub sign_changes: usize,
}

const FRAME_SEGMENTS: usize = 32;

// Thin QR of a 2n x n frame: returns Q and the sign of det R.
fn orthonormalize(y: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let qr = y.clone().qr();
    let sign = qr.r().diagonal().iter().map(|d| d.signum()).product();
    (qr.q(), sign)
}

/// Transports the Lagrangian frame by the linear flow of `G_t` and checks
/// that its state projection stays invertible on `(tau1 + delta0, tau2]`.
pub fn coercivity_hamiltonian(data: &SingularArcData, opts: &SecondVarOptions) -> Result<HamiltonianTest> {
    let n = data.n;
    let n2 = 2 * n;
    let len = data.length();
    if len <= 0.0 {
        return Ok(HamiltonianTest {
            verdict: CoercivityVerdict::Coercive,
            min_sigma: f64::MAX,
            t_min_sigma: data.tau1,
            sign_changes: 0,
        });
    }
    let frame = lagrangian_frame(data);
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let s = data.sample(t)?;
        for c in 0..n {
            let col = &y[c * n2..(c + 1) * n2];
            let dg = (0..n).map(|i| s.g[i] * col[i] - s.c[i] * col[n + i]).sum::<f64>() / s.r;
            let dcol = &mut dy[c * n2..(c + 1) * n2];
            for i in 0..n {
                // omega' = -dG/dzeta, zeta' = dG/domega.
                dcol[i] = s.c[i] * dg;
                dcol[n + i] = s.g[i] * dg;
            }
        }
        Ok(())
    };
    // The coefficients come from interpolated data, so asking the frame
    // flow for the data's own accuracy only produces step-size chatter.
    let frame_opts = IntegratorOptions {
        atol: opts.integrator.atol * 100.0,
        rtol: opts.integrator.rtol * 100.0,
        ..opts.integrator
    };
    // Integrate in segments and re-orthonormalize at each restart: the plane
    // is unchanged but the columns would otherwise collapse onto the
    // dominant direction. `sign` carries the sign of det of the discarded
    // triangular factors, so det(pi Y) keeps its true sign.
    let n_seg = FRAME_SEGMENTS;
    let seg_len = len / n_seg as f64;
    let mut segments: Vec<(DenseOutput, f64)> = Vec::with_capacity(n_seg);
    let (mut start, sign0) = orthonormalize(&frame.basis);
    let mut sign = sign0;
    for k in 0..n_seg {
        let a = data.tau1 + k as f64 * seg_len;
        let b = if k + 1 == n_seg { data.tau2 } else { a + seg_len };
        let flow = integrate_ode(rhs, a, b, start.as_slice(), &frame_opts)?;
        let end = DMatrix::from_column_slice(n2, n, &flow.eval(b));
        segments.push((flow, sign));
        let (q, s_r) = orthonormalize(&end);
        start = q;
        sign *= s_r;
    }
    let t_start = data.tau1 + opts.delta0_frac * len;
    let mut min_sigma = f64::INFINITY;
    let mut t_min = t_start;
    let mut sign_changes = 0;
    let mut first_change = None;
    let mut prev_sign = 0.0;
    // sigma starts near zero because of the structural degeneracy at tau1.
    // While it is still rising out of it, it cannot be approaching a kernel.
    let mut rising = true;
    let mut prev_rel = 0.0;
    for t in grid(t_start, data.tau2, opts.monitor_samples.max(2)) {
        let k = (((t - data.tau1) / seg_len) as usize).min(n_seg - 1);
        let (flow, seg_sign) = &segments[k];
        let y = DMatrix::from_column_slice(n2, n, &flow.eval(t));
        let py = y.rows(n, n).into_owned();
        // Angle between the flowed plane and the fibre: scale-free.
        let q = y.qr().q();
        let rel = q.rows(n, n).into_owned().singular_values().min();
        rising = rising && rel >= prev_rel;
        prev_rel = rel;
        if !rising && rel < min_sigma {
            min_sigma = rel;
            t_min = t;
        }
        let det_sign = py.determinant().signum() * seg_sign;
        if prev_sign != 0.0 && det_sign != 0.0 && det_sign != prev_sign {
            sign_changes += 1;
            first_change.get_or_insert(t);
        }
        if det_sign != 0.0 {
            prev_sign = det_sign;
        }
    }
    if min_sigma == f64::INFINITY {
        // Monotone throughout: the smallest relevant value is the last one.
        min_sigma = prev_rel;
        t_min = data.tau2;
    }
    let verdict = if let Some(t_star) = first_change {
        CoercivityVerdict::NotCoercive { t_star: Some(t_star) }
    } else if min_sigma <= opts.kernel_tol {
        CoercivityVerdict::Marginal { t_star: Some(t_min) }
    } else {
        CoercivityVerdict::Coercive
    };
    Ok(HamiltonianTest {
        verdict,
        min_sigma,
        t_min_sigma: t_min,
        sign_changes,
    })
}

// Five-point Gauss-Legendre rule on [0, 1].
const GL_X: [f64; 5] = [
    0.046_910_077_030_668_004,
    0.230_765_344_947_158_45,
    0.5,
    0.769_234_655_052_841_6,
    0.953_089_922_969_332,
];
const GL_W: [f64; 5] = [
    0.118_463_442_528_094_54,
    0.239_314_335_249_683_23,
    0.284_444_444_444_444_45,
    0.239_314_335_249_683_23,
    0.118_463_442_528_094_54,
];

struct IntervalTerms {
    rho: f64,
    big_c: DVector<f64>,
    big_g: DVector<f64>,
    kappa: f64,
}

fn interval_terms(data: &SingularArcData, a: f64, b: f64) -> Result<IntervalTerms> {
    let n = data.n;
    let h = b - a;
    let mut rho = 0.0;
    let mut big_c = DVector::zeros(n);
    let mut big_g = DVector::zeros(n);
    let mut kappa = 0.0;
    for (&x, &w) in GL_X.iter().zip(&GL_W) {
        let t = a + x * h;
        let s = data.sample(t)?;
        rho += w * h * s.r;
        big_c.axpy(w * h, &s.c, 1.0);
        big_g.axpy(w * h, &s.g, 1.0);
        let mut gamma = DVector::zeros(n);
        for (&xi, &wi) in GL_X.iter().zip(&GL_W) {
            let si = data.sample(a + xi * (t - a))?;
            gamma.axpy(wi * (t - a), &si.g, 1.0);
        }
        kappa += w * h * s.c.dot(&gamma);
    }
    Ok(IntervalTerms { rho, big_c, big_g, kappa })
}

/// Chebyshev-graded mesh on `[a, b]`: end intervals shrink like `1/N^2`.
fn graded_mesh(a: f64, b: f64, nn: usize) -> Vec<f64> {
    (0..=nn)
        .map(|k| match k {
            0 => a,
            k if k == nn => b,
            k => a + 0.5 * (b - a) * (1.0 - (std::f64::consts::PI * k as f64 / nn as f64).cos()),
        })
        .collect()
}

/// Smallest generalised eigenvalue of the discretised form on `N`
/// piecewise-constant intervals, relative to `sum h_k w_k^2`.
///
/// The bottom of the spectrum is often `min R`, reached only by controls
/// concentrating at an end of the arc. A uniform mesh approaches that at
/// first order, so the mesh is graded towards both ends.
pub fn qp_min_eig(data: &SingularArcData, n_intervals: usize) -> Result<f64> {
    let n = data.n;
    let nn = n_intervals.max(1);
    let mesh = graded_mesh(data.tau1, data.tau2, nn);
    let terms: Vec<IntervalTerms> = (0..nn)
        .into_par_iter()
        .map(|k| interval_terms(data, mesh[k], mesh[k + 1]))
        .collect::<Result<_>>()?;
    let dim = nn + 2;
    let e = data.boundary_fields();
    let mut hess = DMatrix::zeros(dim, dim);
    hess.view_mut((0, 0), (2, 2)).copy_from(&data.q_boundary);
    for (k, tk) in terms.iter().enumerate() {
        hess[(k + 2, k + 2)] = tk.rho + 2.0 * tk.kappa;
        let ce = e.tr_mul(&tk.big_c);
        for i in 0..2 {
            hess[(k + 2, i)] = ce[i];
            hess[(i, k + 2)] = ce[i];
        }
        for (j, tj) in terms.iter().enumerate().take(k) {
            let v = tk.big_c.dot(&tj.big_g);
            hess[(k + 2, j + 2)] = v;
            hess[(j + 2, k + 2)] = v;
        }
    }
    let mut a = DMatrix::zeros(n, dim);
    a.view_mut((0, 0), (n, 2)).copy_from(&e);
    for (k, tk) in terms.iter().enumerate() {
        a.set_column(k + 2, &tk.big_g);
    }
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > 1e-10 * smax).count();
    if rank < n || smax == 0.0 {
        return Err(Error::RankDeficientConstraints { rank, needed: n });
    }
    // Null space: eigenvectors of A'A for its dim - n smallest eigenvalues.
    let ata = a.tr_mul(&a);
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let k_null = dim - n;
    let z = DMatrix::from_fn(dim, k_null, |i, j| eig.eigenvectors[(i, order[j])]);
    let hr = z.transpose() * &hess * &z;
    let mut mass = DMatrix::zeros(dim, dim);
    for k in 0..nn {
        mass[(k + 2, k + 2)] = mesh[k + 1] - mesh[k];
    }
    let mr = z.transpose() * &mass * &z;
    let chol = mr.cholesky().ok_or_else(|| Error::RankDeficientConstraints {
        rank: k_null - 1,
        needed: k_null,
    })?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or(Error::RankDeficientConstraints {
        rank: k_null - 1,
        needed: k_null,
    })?;
    let c = &linv * hr * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    Ok(SymmetricEigen::new(c).eigenvalues.min())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpResult {
    /// Eigenvalue at `2N` intervals.
    pub min_eig: f64,
    /// Eigenvalue at `N` intervals.
    pub min_eig_coarse: f64,
    pub n_intervals: usize,
    pub richardson_stable: bool,
    pub verdict: CoercivityVerdict,
}

/// Direct discretisation of the accessory quadratic form.
pub fn coercivity_qp(data: &SingularArcData, opts: &SecondVarOptions) -> Result<QpResult> {
    let nn = opts.n_intervals.max(1);
    let coarse = qp_min_eig(data, nn)?;
    let fine = qp_min_eig(data, 2 * nn)?;
    let mut max_r: f64 = 0.0;
    for t in grid(data.tau1, data.tau2, 33) {
        max_r = max_r.max(data.sample(t)?.r);
    }
    let tol = opts.eig_tol * max_r;
    let richardson_stable = (coarse - fine).abs() <= opts.richardson_tol * fine.abs().max(tol);
    let verdict = if fine < -tol {
        CoercivityVerdict::NotCoercive { t_star: None }
    } else if fine > tol && richardson_stable {
        CoercivityVerdict::Coercive
    } else {
        CoercivityVerdict::Marginal { t_star: None }
    };
    Ok(QpResult {
        min_eig: fine,
        min_eig_coarse: coarse,
        n_intervals: nn,
        richardson_stable,
        verdict,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityRank {
    pub rank: usize,
    /// The `n`-th largest singular value (0 if there are fewer).
    pub smallest_sv: f64,
}

/// Numerical rank of the columns of `m` relative to its largest singular value.
pub fn rank_of_columns(m: &DMatrix<f64>, tol: f64) -> ControllabilityRank {
    let n = m.nrows();
    let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| smax > 0.0 && s > tol * smax).count();
    ControllabilityRank {
        rank,
        smallest_sv: sv.get(n - 1).copied().unwrap_or(0.0),
    }
}

/// Rank of `span{f0(x1), f1(x1), g(t)}` sampled on the arc.
pub fn controllability_rank(data: &SingularArcData, opts: &SecondVarOptions) -> ControllabilityRank {
    let mut cols = vec![data.f0_x1.clone(), data.f1_x1.clone()];
    for t in grid(data.tau1, data.tau2, opts.n_samples) {
        if let Ok(s) = data.sample(t) {
            cols.push(s.g);
        }
    }
    rank_of_columns(&DMatrix::from_columns(&cols), opts.rank_tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AffineSystem;

    fn dubins() -> AffineSystem {
        AffineSystem::parse(&["cos(x3) + r1", "sin(x3) + r2", "0"], &["0", "0", "1"], 2).unwrap()
    }

    fn dubins_arc(len: f64) -> SingularArcData {
        let l1 = CotangentPoint::from_slices(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]);
        singular_arc_from_point(&dubins(), &[0.0, 0.0], &l1, 1.0, 1.0 + len, &SecondVarOptions::default()).unwrap()
    }

    #[test]
    fn dubins_arc_data() {
        let data = dubins_arc(8.0);
        for t in [1.0, 3.0, 9.0] {
            let s = data.sample(t).unwrap();
            assert!((s.r - 1.0).abs() < 1e-12);
            assert!((&s.g - DVector::from_vec(vec![0.0, -1.0, 0.0])).norm() < 1e-10);
            assert!((&s.c - DVector::from_vec(vec![0.0, 0.0, -1.0])).norm() < 1e-10);
        }
        assert!(data.q_boundary().amax() < 1e-14);
    }

    #[test]
    fn dubins_both_tests_coercive() {
        let data = dubins_arc(8.0);
        let opts = SecondVarOptions::default();
        let h = coercivity_hamiltonian(&data, &opts).unwrap();
        assert_eq!(h.verdict, CoercivityVerdict::Coercive);
        let q = coercivity_qp(&data, &opts).unwrap();
        assert_eq!(q.verdict, CoercivityVerdict::Coercive);
        assert!((q.min_eig - 1.0).abs() < 1e-8, "{}", q.min_eig);
        assert!((q.min_eig_coarse - 1.0).abs() < 1e-8);
        let cr = controllability_rank(&data, &opts);
        assert_eq!(cr.rank, 3);
    }

    #[test]
    fn frame_is_lagrangian_with_rank_two_projection() {
        let data = dubins_arc(8.0);
        let f = lagrangian_frame(&data);
        assert!(f.isotropy_defect < 1e-10);
        assert_eq!(f.projected_rank(1e-9), 2);
    }

    #[test]
    fn zero_length_arc_is_trivially_coercive() {
        let data = dubins_arc(0.0);
        let h = coercivity_hamiltonian(&data, &SecondVarOptions::default()).unwrap();
        assert_eq!(h.verdict, CoercivityVerdict::Coercive);
    }

    #[test]
    fn c_identity_at_start() {
        // Heading 0.7 with a drift so Df01 has more than one entry.
        let sys = AffineSystem::parse(&["cos(x3) + 0.3*x2", "sin(x3)", "0.2*x1"], &["0", "0", "1"], 0).unwrap();
        let q1 = [0.2, -0.1, 0.7];
        let p1 = [0.9, 0.4, 0.0];
        let l1 = CotangentPoint::from_slices(&p1, &q1);
        let lv = sys.lift_values(&l1, &[]).unwrap();
        if lv.f101 <= 0.0 {
            return;
        }
        let data = singular_arc_from_point(&sys, &[], &l1, 0.0, 0.5, &SecondVarOptions::default()).unwrap();
        let s = data.sample(0.0).unwrap();
        let df01 = sys.brackets.f01.jacobian(&q1, &[]).unwrap();
        let expect = -(DVector::from_column_slice(&p1).transpose() * df01).transpose();
        assert!((&s.c - expect).norm() < 1e-10);
        let f01 = sys.brackets.f01.eval(&q1, &[]).unwrap();
        assert!((&s.g - f01).norm() < 1e-12);
    }

    #[test]
    fn duplicate_columns_are_rank_deficient() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = DMatrix::from_columns(&[v.clone(), v.clone(), v * 2.0]);
        assert_eq!(rank_of_columns(&m, 1e-8).rank, 1);
        let planar = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(rank_of_columns(&planar, 1e-8).rank, 2);
    }

    #[test]
    fn sglc_violation_fails_build() {
        let l1 = CotangentPoint::from_slices(&[-1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]);
        let r = singular_arc_from_point(&dubins(), &[0.0, 0.0], &l1, 0.0, 1.0, &SecondVarOptions::default());
        assert!(matches!(r, Err(Error::SglcViolated { .. })));
    }
}
