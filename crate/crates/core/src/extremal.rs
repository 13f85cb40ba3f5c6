//! Bang-singular-bang extremals: assembly from the structure unknowns and
//! pointwise certification.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::flows::{integrate, variational, FlowSegment, HamiltonianField, IntegratorOptions};
use crate::geometry::{AffineSystem, CotangentPoint, LiftValues};
use crate::secondvar::{self, CoercivityVerdict, QpResult, SecondVarOptions};
use crate::symexpr::{Expr, Layout, Tape, Var};
use crate::{Error, Result};

/// Endpoint map `r -> a(r)` with its Jacobian.
#[derive(Clone, Debug)]
pub struct EndpointMap {
    exprs: Vec<Expr>,
    n: usize,
    m: usize,
    tape: Tape,
}

impl EndpointMap {
    pub fn new(exprs: Vec<Expr>, m: usize) -> Result<Self> {
        let n = exprs.len();
        for e in &exprs {
            let (xs, rs, ps) = e.var_extent();
            if xs > 0 || ps > 0 || rs > m {
                return Err(Error::Validation(format!("endpoint component `{e}` may only depend on r1..r{m}")));
            }
        }
        let mut outs = exprs.clone();
        for e in &exprs {
            for k in 0..m {
                outs.push(e.differentiate(Var::Param(k)));
            }
        }
        let tape = Tape::compile(&outs, Layout::new(0, m));
        Ok(EndpointMap { exprs, n, m, tape })
    }

    pub fn exprs(&self) -> &[Expr] {
        &self.exprs
    }

    fn eval_all(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.m {
            return Err(Error::DimensionMismatch {
                what: "parameter",
                expected: self.m,
                got: r.len(),
            });
        }
        Ok(self.tape.eval_vec(r)?)
    }

    pub fn value(&self, r: &[f64]) -> Result<DVector<f64>> {
        let v = self.eval_all(r)?;
        Ok(DVector::from_column_slice(&v[..self.n]))
    }

    /// `n x m` Jacobian with respect to `r`.
    pub fn jacobian(&self, r: &[f64]) -> Result<DMatrix<f64>> {
        let v = self.eval_all(r)?;
        Ok(DMatrix::from_row_slice(self.n, self.m, &v[self.n..]))
    }
}

/// A fully compiled problem `(P_r)`: dynamics, endpoints and the bang signs
/// of the reference structure.
#[derive(Clone, Debug)]
pub struct CompiledProblem {
    pub name: String,
    pub system: AffineSystem,
    pub a: EndpointMap,
    pub b: EndpointMap,
    pub u1: f64,
    pub u2: f64,
    bang1: HamiltonianField,
    singular: HamiltonianField,
    bang2: HamiltonianField,
}

impl CompiledProblem {
    pub fn new(name: impl Into<String>, system: AffineSystem, a: EndpointMap, b: EndpointMap, u1: f64, u2: f64) -> Result<Self> {
        let n = system.dim();
        for (what, e) in [("initial point", &a), ("final point", &b)] {
            if e.n != n {
                return Err(Error::Validation(format!("{what} has {} components, expected {n}", e.n)));
            }
            if e.m > system.n_param() {
                return Err(Error::Validation(format!("{what} uses more parameters than the dynamics declare")));
            }
        }
        let m = system.n_param();
        let a = EndpointMap::new(a.exprs, m)?;
        let b = EndpointMap::new(b.exprs, m)?;
        Ok(CompiledProblem {
            name: name.into(),
            bang1: HamiltonianField::bang(&system, u1)?,
            singular: HamiltonianField::singular(&system),
            bang2: HamiltonianField::bang(&system, u2)?,
            system,
            a,
            b,
            u1,
            u2,
        })
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn n_param(&self) -> usize {
        self.system.n_param()
    }

    pub fn bang1(&self) -> &HamiltonianField {
        &self.bang1
    }

    pub fn singular(&self) -> &HamiltonianField {
        &self.singular
    }

    pub fn bang2(&self) -> &HamiltonianField {
        &self.bang2
    }
}

/// Shooting unknowns `z = (omega, tau1, tau2, T)` plus the bang signs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremalStructure {
    pub omega: Vec<f64>,
    pub tau1: f64,
    pub tau2: f64,
    pub t_final: f64,
    pub u1: f64,
    pub u2: f64,
}

impl ExtremalStructure {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.tau1 && self.tau1 < self.tau2 && self.tau2 < self.t_final;
        if !ok || !self.t_final.is_finite() {
            return Err(Error::InvalidStructure(format!(
                "need 0 < tau1 < tau2 < T, got tau1 = {}, tau2 = {}, T = {}",
                self.tau1, self.tau2, self.t_final
            )));
        }
        if self.omega.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidStructure("initial covector is not finite".into()));
        }
        for u in [self.u1, self.u2] {
            if u != 1.0 && u != -1.0 {
                return Err(Error::InvalidStructure(format!("bang value {u} is not +-1")));
            }
        }
        Ok(())
    }

    /// Flat `(omega, tau1, tau2, T)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.omega.clone();
        v.extend([self.tau1, self.tau2, self.t_final]);
        DVector::from_vec(v)
    }

    pub fn from_vector(z: &DVector<f64>, u1: f64, u2: f64) -> Self {
        let n = z.len() - 3;
        ExtremalStructure {
            omega: z.as_slice()[..n].to_vec(),
            tau1: z[n],
            tau2: z[n + 1],
            t_final: z[n + 2],
            u1,
            u2,
        }
    }
}

/// An assembled bang-singular-bang candidate.
#[derive(Clone, Debug)]
pub struct BsbExtremal {
    pub structure: ExtremalStructure,
    pub r: Vec<f64>,
    /// Bang on `[0, tau1]`, singular on `[tau1, tau2]`, bang on `[tau2, T]`.
    pub arcs: [FlowSegment; 3],
}

impl BsbExtremal {
    pub fn arc_index(&self, t: f64) -> usize {
        if t <= self.structure.tau1 {
            0
        } else if t <= self.structure.tau2 {
            1
        } else {
            2
        }
    }

    pub fn point(&self, t: f64) -> CotangentPoint {
        self.arcs[self.arc_index(t)].point(t)
    }

    /// `l1 = lambda(tau1)`.
    pub fn first_junction(&self) -> CotangentPoint {
        self.arcs[0].end_point()
    }

    /// `l2 = lambda(tau2)`.
    pub fn second_junction(&self) -> CotangentPoint {
        self.arcs[1].end_point()
    }

    pub fn final_point(&self) -> CotangentPoint {
        self.arcs[2].end_point()
    }

    /// Reference control on the arc containing `t`.
    pub fn control(&self, prob: &CompiledProblem, t: f64) -> Result<f64> {
        match self.arc_index(t) {
            0 => Ok(self.structure.u1),
            1 => prob.system.singular_control(&self.arcs[1].point(t), &self.r),
            _ => Ok(self.structure.u2),
        }
    }

    /// `samples` equispaced points per arc, endpoints included: `(t, l, u)`.
    pub fn sample(&self, prob: &CompiledProblem, samples: usize) -> Result<Vec<(f64, CotangentPoint, f64)>> {
        let mut out = Vec::with_capacity(3 * samples);
        for (k, arc) in self.arcs.iter().enumerate() {
            for t in grid(arc.t0(), arc.t1(), samples) {
                let l = arc.point(t);
                let u = match k {
                    0 => self.structure.u1,
                    1 => prob.system.singular_control(&l, &self.r)?,
                    _ => self.structure.u2,
                };
                out.push((t, l, u));
            }
        }
        Ok(out)
    }
}

pub(crate) fn grid(a: f64, b: f64, samples: usize) -> Vec<f64> {
    match samples {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..samples)
            .map(|i| {
                if i + 1 == samples {
                    b
                } else {
                    a + (b - a) * i as f64 / (samples - 1) as f64
                }
            })
            .collect(),
    }
}

fn check_structure(prob: &CompiledProblem, r: &[f64], z: &ExtremalStructure) -> Result<()> {
    z.validate()?;
    if z.omega.len() != prob.dim() {
        return Err(Error::DimensionMismatch {
            what: "initial covector",
            expected: prob.dim(),
            got: z.omega.len(),
        });
    }
    if r.len() != prob.n_param() {
        return Err(Error::DimensionMismatch {
            what: "parameter",
            expected: prob.n_param(),
            got: r.len(),
        });
    }
    if z.u1 != prob.u1 || z.u2 != prob.u2 {
        return Err(Error::InvalidStructure("bang signs differ from the problem's".into()));
    }
    Ok(())
}

fn assemble_impl(
    prob: &CompiledProblem,
    r: &[f64],
    z: &ExtremalStructure,
    opts: &IntegratorOptions,
    with_variations: bool,
) -> Result<BsbExtremal> {
    check_structure(prob, r, z)?;
    let flow = if with_variations { variational } else { integrate };
    let a = prob.a.value(r)?;
    let l0 = CotangentPoint::new(DVector::from_column_slice(&z.omega), a);
    let arc1 = flow(&prob.bang1, &l0, 0.0, z.tau1, r, opts)?;
    let arc2 = flow(&prob.singular, &arc1.end_point(), z.tau1, z.tau2, r, opts)?;
    let arc3 = flow(&prob.bang2, &arc2.end_point(), z.tau2, z.t_final, r, opts)?;
    Ok(BsbExtremal {
        structure: z.clone(),
        r: r.to_vec(),
        arcs: [arc1, arc2, arc3],
    })
}

/// Integrates bang, singular and bang arcs from `(omega, a(r))`. The third
/// arc has duration `T - tau2`.
pub fn assemble(prob: &CompiledProblem, r: &[f64], z: &ExtremalStructure, opts: &IntegratorOptions) -> Result<BsbExtremal> {
    assemble_impl(prob, r, z, opts, false)
}

/// As [`assemble`], also carrying transition and parameter-sensitivity
/// matrices on every arc.
pub fn assemble_variational(prob: &CompiledProblem, r: &[f64], z: &ExtremalStructure, opts: &IntegratorOptions) -> Result<BsbExtremal> {
    assemble_impl(prob, r, z, opts, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyOptions {
    pub samples_per_arc: usize,
    /// Junction collar as a fraction of the arc length.
    pub collar_frac: f64,
    /// Largest accepted `|F0 + u F1 - 1|` along the extremal.
    pub drift_tol: f64,
    pub secondvar: SecondVarOptions,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            samples_per_arc: 512,
            collar_frac: 1e-3,
            drift_tol: 1e-6,
            secondvar: SecondVarOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpSummary {
    #[serde(with = "crate::problems_io::ext_float")]
    pub min_eig: f64,
    #[serde(with = "crate::problems_io::ext_float")]
    pub min_eig_coarse: f64,
    pub richardson_stable: bool,
    pub verdict: CoercivityVerdict,
}

impl From<&QpResult> for QpSummary {
    fn from(q: &QpResult) -> Self {
        QpSummary {
            min_eig: q.min_eig,
            min_eig_coarse: q.min_eig_coarse,
            richardson_stable: q.richardson_stable,
            verdict: q.verdict.clone(),
        }
    }
}

/// Signed margins for every pointwise and second-order condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    /// `min u1 F1` on `[0, tau1 - collar]`.
    #[serde(with = "crate::problems_io::ext_float")]
    pub margin_bang1: f64,
    /// `min u2 F1` on `[tau2 + collar, T]`.
    #[serde(with = "crate::problems_io::ext_float")]
    pub margin_bang2: f64,
    /// `min F101` on `[tau1, tau2]`.
    #[serde(with = "crate::problems_io::ext_float")]
    pub margin_sglc: f64,
    /// `(u1 F001 + F101)(l1)`.
    #[serde(with = "crate::problems_io::ext_float")]
    pub junction1: f64,
    /// `(u2 F001 + F101)(l2)`.
    #[serde(with = "crate::problems_io::ext_float")]
    pub junction2: f64,
    /// `max |v|` on the singular arc.
    #[serde(with = "crate::problems_io::ext_float")]
    pub sup_v: f64,
    /// `max |F0 + u F1 - 1|` along the extremal.
    #[serde(with = "crate::problems_io::ext_float")]
    pub normality_drift: f64,
    /// `(F1, F01, F0 - 1)` at `l1`.
    #[serde(with = "crate::problems_io::ext_float::array3")]
    pub switching_residuals: [f64; 3],
    #[serde(with = "crate::problems_io::ext_float")]
    pub max_abs_f1_singular: f64,
    #[serde(with = "crate::problems_io::ext_float")]
    pub max_abs_f01_singular: f64,
    pub controllability_rank: usize,
    #[serde(with = "crate::problems_io::ext_float")]
    pub controllability_smallest_sv: f64,
    pub coercivity_hamiltonian: CoercivityVerdict,
    pub coercivity_qp: Option<QpSummary>,
    #[serde(with = "crate::problems_io::ext_float")]
    pub injectivity_margin: f64,
    pub pass: bool,
    pub failures: Vec<String>,
}

/// Minimum of `f` over `[a, b]`: `n`-point grid, then golden-section search
/// around the best sample.
fn grid_min<F>(mut f: F, a: f64, b: f64, n: usize) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let ts = grid(a, b, n.max(2));
    let mut best = (a, f64::INFINITY);
    let mut best_i = 0;
    for (i, &t) in ts.iter().enumerate() {
        let v = f(t)?;
        if v < best.1 {
            best = (t, v);
            best_i = i;
        }
    }
    let lo = ts[best_i.saturating_sub(1)];
    let hi = ts[(best_i + 1).min(ts.len() - 1)];
    if hi > lo {
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let (mut x0, mut x3) = (lo, hi);
        let mut x1 = x3 - g * (x3 - x0);
        let mut x2 = x0 + g * (x3 - x0);
        let (mut f1, mut f2) = (f(x1)?, f(x2)?);
        for _ in 0..60 {
            if f1 < f2 {
                x3 = x2;
                x2 = x1;
                f2 = f1;
                x1 = x3 - g * (x3 - x0);
                f1 = f(x1)?;
            } else {
                x0 = x1;
                x1 = x2;
                f1 = f2;
                x2 = x0 + g * (x3 - x0);
                f2 = f(x2)?;
            }
            if (x3 - x0).abs() <= 1e-12 * (1.0 + x3.abs()) {
                break;
            }
        }
        for (t, v) in [(x1, f1), (x2, f2)] {
            if v < best.1 {
                best = (t, v);
            }
        }
    }
    Ok(best)
}

/// Evaluates every certificate; failures surface as non-positive margins
/// and entries of `failures`, never as errors.
pub fn certify(ext: &BsbExtremal, prob: &CompiledProblem, opts: &CertifyOptions) -> CertificationReport {
    let sys = &prob.system;
    let r = ext.r.as_slice();
    let z = &ext.structure;
    let n = prob.dim();
    let mut failures = Vec::new();
    let lifts = |l: &CotangentPoint| sys.lift_values(l, r);
    let nan_on_err = |res: Result<(f64, f64)>, what: &str, failures: &mut Vec<String>| match res {
        Ok((_, v)) => v,
        Err(e) => {
            failures.push(format!("{what}: {e}"));
            f64::NEG_INFINITY
        }
    };
    let samples = opts.samples_per_arc;

    let collar1 = opts.collar_frac * z.tau1;
    let collar3 = opts.collar_frac * (z.t_final - z.tau2);
    let margin_bang1 = nan_on_err(
        grid_min(|t| Ok(z.u1 * lifts(&ext.arcs[0].point(t))?.f1), 0.0, z.tau1 - collar1, samples),
        "bang arc 1",
        &mut failures,
    );
    let margin_bang2 = nan_on_err(
        grid_min(
            |t| Ok(z.u2 * lifts(&ext.arcs[2].point(t))?.f1),
            z.tau2 + collar3,
            z.t_final,
            samples,
        ),
        "bang arc 2",
        &mut failures,
    );
    let margin_sglc = nan_on_err(
        grid_min(|t| Ok(lifts(&ext.arcs[1].point(t))?.f101), z.tau1, z.tau2, samples),
        "singular arc",
        &mut failures,
    );
    let neg_sup_v = nan_on_err(
        grid_min(
            |t| Ok(-sys.singular_control(&ext.arcs[1].point(t), r)?.abs()),
            z.tau1,
            z.tau2,
            samples,
        ),
        "singular control",
        &mut failures,
    );
    let sup_v = -neg_sup_v;

    let l1 = ext.first_junction();
    let l2 = ext.second_junction();
    let junction = |l: &CotangentPoint, u: f64| -> Result<(LiftValues, f64)> {
        let lv = lifts(l)?;
        Ok((lv, u * lv.f001 + lv.f101))
    };
    let (lv1, junction1) = junction(&l1, z.u1).unwrap_or_else(|e| {
        failures.push(format!("junction 1: {e}"));
        (zero_lifts(), f64::NEG_INFINITY)
    });
    let junction2 = junction(&l2, z.u2).map(|x| x.1).unwrap_or_else(|e| {
        failures.push(format!("junction 2: {e}"));
        f64::NEG_INFINITY
    });
    let switching_residuals = [lv1.f1, lv1.f01, lv1.f0 - 1.0];

    let mut drift: f64 = 0.0;
    let mut max_f1: f64 = 0.0;
    let mut max_f01: f64 = 0.0;
    let mut points = Vec::with_capacity(3 * samples);
    for (k, arc) in ext.arcs.iter().enumerate() {
        for t in grid(arc.t0(), arc.t1(), samples) {
            let l = arc.point(t);
            match lifts(&l) {
                Ok(lv) => {
                    let u = match k {
                        0 => z.u1,
                        1 => {
                            max_f1 = max_f1.max(lv.f1.abs());
                            max_f01 = max_f01.max(lv.f01.abs());
                            -lv.f001 / lv.f101
                        }
                        _ => z.u2,
                    };
                    drift = drift.max((lv.f0 + u * lv.f1 - 1.0).abs());
                }
                Err(e) => {
                    failures.push(format!("lift evaluation at t = {t}: {e}"));
                    drift = f64::INFINITY;
                }
            }
            points.push((t, l.q));
        }
    }
    if drift.is_nan() {
        drift = f64::INFINITY;
    }

    let collar_inj = opts.collar_frac * z.t_final;
    let mut injectivity_margin = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if (points[j].0 - points[i].0).abs() > collar_inj {
                let d = (&points[i].1 - &points[j].1).norm();
                injectivity_margin = injectivity_margin.min(d);
            }
        }
    }

    let (mut rank, mut smallest_sv) = (0, 0.0);
    let mut coercivity_hamiltonian = CoercivityVerdict::Failed {
        reason: "not evaluated".into(),
    };
    let mut coercivity_qp = None;
    match secondvar::build_singular_arc_data(ext, prob, &opts.secondvar) {
        Ok(data) => {
            let cr = secondvar::controllability_rank(&data, &opts.secondvar);
            rank = cr.rank;
            smallest_sv = cr.smallest_sv;
            coercivity_hamiltonian = match secondvar::coercivity_hamiltonian(&data, &opts.secondvar) {
                Ok(h) => h.verdict,
                Err(e) => CoercivityVerdict::Failed { reason: e.to_string() },
            };
            match secondvar::coercivity_qp(&data, &opts.secondvar) {
                Ok(q) => coercivity_qp = Some(QpSummary::from(&q)),
                Err(e) => failures.push(format!("second variation (QP): {e}")),
            }
        }
        Err(e) => failures.push(format!("singular arc data: {e}")),
    }

    let checks: [(&str, bool); 11] = [
        ("bang arc 1 margin", margin_bang1 > 0.0),
        ("bang arc 2 margin", margin_bang2 > 0.0),
        ("SGLC margin", margin_sglc > 0.0),
        ("junction 1", junction1 > 0.0),
        ("junction 2", junction2 > 0.0),
        ("singular control |v| < 1", sup_v < 1.0),
        ("normality drift", drift <= opts.drift_tol),
        ("controllability rank", rank == n),
        (
            "coercivity (Hamiltonian test)",
            coercivity_hamiltonian == CoercivityVerdict::Coercive,
        ),
        (
            "coercivity (QP test)",
            coercivity_qp.as_ref().is_some_and(|q| q.verdict == CoercivityVerdict::Coercive),
        ),
        ("injectivity", injectivity_margin > 0.0),
    ];
    for (what, ok) in checks {
        if !ok {
            failures.push(format!("{what} failed"));
        }
    }
    CertificationReport {
        margin_bang1,
        margin_bang2,
        margin_sglc,
        junction1,
        junction2,
        sup_v,
        normality_drift: drift,
        switching_residuals,
        max_abs_f1_singular: max_f1,
        max_abs_f01_singular: max_f01,
        controllability_rank: rank,
        controllability_smallest_sv: smallest_sv,
        coercivity_hamiltonian,
        coercivity_qp,
        injectivity_margin,
        pass: failures.is_empty(),
        failures,
    }
}

fn zero_lifts() -> LiftValues {
    LiftValues {
        f0: f64::NAN,
        f1: f64::NAN,
        f01: f64::NAN,
        f001: f64::NAN,
        f101: f64::NAN,
    }
}
