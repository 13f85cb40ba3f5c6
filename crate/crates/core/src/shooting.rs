//! Shooting map `Psi(r, z)`, its Newton solver, continuation in `r` and a
//! probe-based uniqueness scan.
//!
//! `z = (omega, tau1, tau2, T)`. The residual stacks the endpoint mismatch
//! `pi(l(T)) - b(r)` with `(F1, F01, F0 - 1)` evaluated at `l1 = l(tau1)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::extremal::{
    assemble, assemble_variational, certify, BsbExtremal, CertificationReport, CertifyOptions, CompiledProblem, ExtremalStructure,
};
use crate::flows::IntegratorOptions;
use crate::geometry::{CotangentPoint, Lift};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShootingOptions {
    /// Euclidean norm of the residual at acceptance.
    pub newton_tol: f64,
    pub max_iter: usize,
    pub cond_max: f64,
    /// Smallest damping factor tried in the backtracking line search.
    pub min_damping: f64,
    /// Step halvings allowed per continuation step.
    pub max_halvings: usize,
    /// Certify every accepted record.
    pub certify: bool,
    pub integrator: IntegratorOptions,
    pub certification: CertifyOptions,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        ShootingOptions {
            newton_tol: 1e-10,
            max_iter: 25,
            cond_max: 1e12,
            min_damping: 1.0 / 64.0,
            max_halvings: 10,
            certify: true,
            integrator: IntegratorOptions::with_tol(1e-12),
            certification: CertifyOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShootingResidual {
    /// `pi(l(T)) - b(r)`.
    pub endpoint: Vec<f64>,
    /// `F1(l1)`.
    pub s1: f64,
    /// `F01(l1)`.
    pub s2: f64,
    /// `F0(l1) - 1`.
    pub s3: f64,
}

impl ShootingResidual {
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = self.endpoint.clone();
        v.extend([self.s1, self.s2, self.s3]);
        DVector::from_vec(v)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Residual of an already assembled extremal.
pub fn residual_of(ext: &BsbExtremal, prob: &CompiledProblem) -> Result<ShootingResidual> {
    let b = prob.b.value(&ext.r)?;
    let lf = ext.final_point();
    let lv = prob.system.lift_values(&ext.first_junction(), &ext.r)?;
    Ok(ShootingResidual {
        endpoint: (lf.q - b).as_slice().to_vec(),
        s1: lv.f1,
        s2: lv.f01,
        s3: lv.f0 - 1.0,
    })
}

pub fn residual(prob: &CompiledProblem, r: &[f64], z: &ExtremalStructure, opts: &IntegratorOptions) -> Result<ShootingResidual> {
    residual_of(&assemble(prob, r, z, opts)?, prob)
}

/// Residual with its derivatives in `z` and `r`.
#[derive(Clone, Debug)]
pub struct ShootingJacobian {
    pub residual: ShootingResidual,
    /// `(n+3) x (n+3)`.
    pub dz: DMatrix<f64>,
    /// `(n+3) x m`.
    pub dr: DMatrix<f64>,
}

fn col(l: &CotangentPoint) -> DVector<f64> {
    DVector::from_vec(l.to_flat())
}

pub fn jacobian(prob: &CompiledProblem, r: &[f64], z: &ExtremalStructure, opts: &IntegratorOptions) -> Result<ShootingJacobian> {
    let n = prob.dim();
    let m = prob.n_param();
    let n2 = 2 * n;
    let ext = assemble_variational(prob, r, z, opts)?;
    let res = residual_of(&ext, prob)?;
    let l1 = ext.first_junction();
    let l2 = ext.second_junction();
    let lf = ext.final_point();
    let (phi1, psi1) = ext.arcs[0].end_variation();
    let (phi2, psi2) = ext.arcs[1].end_variation();
    let (phi3, psi3) = ext.arcs[2].end_variation();
    let h1 = col(&prob.bang1().eval(&l1, r)?);
    let fs2 = col(&prob.singular().eval(&l2, r)?);
    let h2f = col(&prob.bang2().eval(&lf, r)?);

    // Derivatives of l1 and lf with respect to z = (omega, tau1, tau2, T).
    let mut dl1 = DMatrix::zeros(n2, n + 3);
    dl1.view_mut((0, 0), (n2, n)).copy_from(&phi1.columns(0, n));
    dl1.set_column(n, &h1);
    let phi32 = &phi3 * &phi2;
    let mut dlf = DMatrix::zeros(n2, n + 3);
    dlf.view_mut((0, 0), (n2, n)).copy_from(&(&phi32 * phi1.columns(0, n)));
    let dl2_dtau1 = &phi2 * &h1 - &fs2;
    dlf.set_column(n, &(&phi3 * dl2_dtau1));
    dlf.set_column(n + 1, &(&phi3 * &fs2 - &h2f));
    dlf.set_column(n + 2, &h2f);

    // Derivatives with respect to r; l0 = (omega, a(r)).
    let mut dl0_dr = DMatrix::zeros(n2, m);
    dl0_dr.view_mut((n, 0), (n, m)).copy_from(&prob.a.jacobian(r)?);
    let dl1_dr = &phi1 * &dl0_dr + &psi1;
    let dl2_dr = &phi2 * &dl1_dr + &psi2;
    let dlf_dr = &phi3 * &dl2_dr + &psi3;

    let mut dz = DMatrix::zeros(n + 3, n + 3);
    let mut dr = DMatrix::zeros(n + 3, m);
    dz.view_mut((0, 0), (n, n + 3)).copy_from(&dlf.rows(n, n));
    dr.view_mut((0, 0), (n, m)).copy_from(&(dlf_dr.rows(n, n) - prob.b.jacobian(r)?));
    let grads = prob.system.lift_gradients(&l1, r)?;
    for (row, lift) in [Lift::F1, Lift::F01, Lift::F0].into_iter().enumerate() {
        let g = &grads[lift as usize];
        // The tau2 and T columns stay exactly zero.
        for j in 0..=n {
            dz[(n + row, j)] = g.d_l.dot(&dl1.column(j));
        }
        for k in 0..m {
            dr[(n + row, k)] = g.d_l.dot(&dl1_dr.column(k)) + g.d_r[k];
        }
    }
    Ok(ShootingJacobian { residual: res, dz, dr })
}

fn condition_number(j: &DMatrix<f64>) -> f64 {
    let sv = j.clone().singular_values();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

/// One converged point of the solution branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationRecord {
    pub r: Vec<f64>,
    pub structure: ExtremalStructure,
    /// `dPsi/dz` at the solution, row-major.
    pub jacobian: Vec<Vec<f64>>,
    /// `dz/dr = -(dPsi/dz)^-1 dPsi/dr`, row-major `(n+3) x m`.
    pub sensitivity: Vec<Vec<f64>>,
    #[serde(with = "crate::problems_io::ext_float")]
    pub condition_number: f64,
    pub iterations: usize,
    pub residual_norm: f64,
    pub certification: Option<CertificationReport>,
}

impl ContinuationRecord {
    pub fn z(&self) -> DVector<f64> {
        self.structure.to_vector()
    }

    pub fn jacobian_matrix(&self) -> DMatrix<f64> {
        matrix_of(&self.jacobian)
    }

    pub fn sensitivity_matrix(&self) -> DMatrix<f64> {
        matrix_of(&self.sensitivity)
    }

    pub fn passed(&self) -> bool {
        self.certification.as_ref().is_some_and(|c| c.pass)
    }
}

fn structure_ok(z: &ExtremalStructure) -> Result<()> {
    z.validate().map_err(|e| match e {
        Error::InvalidStructure(msg) => Error::StructureBroken(msg),
        other => other,
    })
}

fn newton_core(prob: &CompiledProblem, r: &[f64], z0: &ExtremalStructure, opts: &ShootingOptions) -> Result<ContinuationRecord> {
    structure_ok(z0)?;
    let (u1, u2) = (z0.u1, z0.u2);
    let mut z = z0.clone();
    let mut iterations = 0;
    loop {
        let jac = jacobian(prob, r, &z, &opts.integrator)?;
        let f = jac.residual.to_vector();
        let fnorm = f.norm();
        let cond = condition_number(&jac.dz);
        if fnorm <= opts.newton_tol {
            let lu = jac.dz.clone().lu();
            let sens = lu.solve(&(-&jac.dr)).ok_or(Error::SingularJacobian { cond })?;
            return Ok(ContinuationRecord {
                r: r.to_vec(),
                structure: z,
                jacobian: rows_of(&jac.dz),
                sensitivity: rows_of(&sens),
                condition_number: cond,
                iterations,
                residual_norm: fnorm,
                certification: None,
            });
        }
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                residual: fnorm,
            });
        }
        if !(cond <= opts.cond_max) {
            return Err(Error::SingularJacobian { cond });
        }
        let step = jac.dz.lu().solve(&(-&f)).ok_or(Error::SingularJacobian { cond })?;
        let zv = z.to_vector();
        let mut alpha = 1.0;
        let mut accepted = None;
        let mut last_err = None;
        while alpha >= opts.min_damping {
            let trial = ExtremalStructure::from_vector(&(&zv + &step * alpha), u1, u2);
            match structure_ok(&trial).and_then(|_| residual(prob, r, &trial, &opts.integrator)) {
                Ok(res) if res.norm() < fnorm || alpha <= opts.min_damping => {
                    accepted = Some(trial);
                    break;
                }
                Ok(_) => {}
                Err(e) => last_err = Some(e),
            }
            alpha *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some(t) => z = t,
            None => {
                return Err(last_err.unwrap_or(Error::NoConvergence {
                    iterations,
                    residual: fnorm,
                }))
            }
        }
    }
}

fn attach_certificate(prob: &CompiledProblem, rec: &mut ContinuationRecord, opts: &ShootingOptions) -> Result<()> {
    let ext = assemble(prob, &rec.r, &rec.structure, &opts.integrator)?;
    rec.certification = Some(certify(&ext, prob, &opts.certification));
    Ok(())
}

/// Damped Newton from `z0`; certifies the solution when `opts.certify`.
pub fn newton_solve(prob: &CompiledProblem, r: &[f64], z0: &ExtremalStructure, opts: &ShootingOptions) -> Result<ContinuationRecord> {
    let mut rec = newton_core(prob, r, z0, opts)?;
    if opts.certify {
        attach_certificate(prob, &mut rec, opts)?;
    }
    Ok(rec)
}

/// Records at each requested parameter, plus why the path stopped early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationPath {
    pub records: Vec<ContinuationRecord>,
    pub stopped: Option<String>,
}

fn predict(rec: &ContinuationRecord, r: &[f64]) -> ExtremalStructure {
    let dr = DVector::from_iterator(r.len(), r.iter().zip(&rec.r).map(|(a, b)| a - b));
    let z = rec.z() + rec.sensitivity_matrix() * dr;
    ExtremalStructure::from_vector(&z, rec.structure.u1, rec.structure.u2)
}

/// Tangent-predictor continuation along `r_path`, halving the step on
/// failure. Stops after the first record whose certificate fails.
pub fn continue_path(
    prob: &CompiledProblem,
    r_path: &[Vec<f64>],
    z0: &ExtremalStructure,
    opts: &ShootingOptions,
) -> Result<ContinuationPath> {
    let Some(r0) = r_path.first() else {
        return Ok(ContinuationPath {
            records: Vec::new(),
            stopped: None,
        });
    };
    let mut first = newton_core(prob, r0, z0, opts)?;
    if opts.certify {
        attach_certificate(prob, &mut first, opts)?;
    }
    let mut records = vec![first];
    let mut stopped = None;
    if opts.certify && !records[0].passed() {
        stopped = Some(format!("certificate failed at r = {:?}", records[0].r));
    }
    for target in r_path.iter().skip(1) {
        if stopped.is_some() {
            break;
        }
        let mut cur = records.last().unwrap().clone();
        let mut frac = 1.0;
        let mut halvings = 0;
        let mut rec = loop {
            let r_try: Vec<f64> = cur.r.iter().zip(target).map(|(a, b)| a + frac * (b - a)).collect();
            match newton_core(prob, &r_try, &predict(&cur, &r_try), opts) {
                Ok(rec) if frac == 1.0 => break rec,
                Ok(rec) => {
                    cur = rec;
                    frac = 1.0;
                }
                Err(e) => {
                    halvings += 1;
                    if halvings > opts.max_halvings {
                        let residual = match e {
                            Error::NoConvergence { residual, .. } => residual,
                            _ => f64::NAN,
                        };
                        return Err(Error::NoConvergence {
                            iterations: halvings,
                            residual,
                        });
                    }
                    frac *= 0.5;
                }
            }
        };
        if opts.certify {
            attach_certificate(prob, &mut rec, opts)?;
        }
        let failed = opts.certify && !rec.passed();
        records.push(rec);
        if failed {
            stopped = Some(format!("certificate failed at r = {target:?}"));
        }
    }
    Ok(ContinuationPath { records, stopped })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UniquenessOptions {
    pub n_probe: usize,
    /// Half-width of the covector box; `0.1 |omega|` when `None`.
    pub box_radius: Option<f64>,
    /// Half-width for `tau1`, `tau2`, `T`; `0.01 T` when `None`.
    pub time_radius: Option<f64>,
    pub seed: u64,
    /// Sup-norm distance above which two zeros are distinct.
    pub distinct_tol: f64,
}

impl Default for UniquenessOptions {
    fn default() -> Self {
        UniquenessOptions {
            n_probe: 200,
            box_radius: None,
            time_radius: None,
            seed: 0,
            distinct_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub n_zeros_found: usize,
    pub n_probes: usize,
    pub n_converged: usize,
    /// Distinct zeros, the record's own first.
    pub zeros: Vec<ExtremalStructure>,
}

/// Runs Newton from random probes around `record` and counts the distinct
/// zeros found inside twice the probe box.
pub fn uniqueness_scan(
    prob: &CompiledProblem,
    record: &ContinuationRecord,
    opts: &UniquenessOptions,
    shooting: &ShootingOptions,
) -> UniquenessReport {
    let z = &record.structure;
    let n = z.omega.len();
    let omega_norm = z.omega.iter().map(|w| w * w).sum::<f64>().sqrt();
    let box_r = opts.box_radius.unwrap_or(0.1 * omega_norm);
    let time_r = opts.time_radius.unwrap_or(if box_r == 0.0 { 0.0 } else { 0.01 * z.t_final });
    let mut zeros = vec![z.clone()];
    if box_r == 0.0 && time_r == 0.0 {
        return UniquenessReport {
            n_zeros_found: 1,
            n_probes: 0,
            n_converged: 0,
            zeros,
        };
    }
    let mut core = *shooting;
    core.certify = false;
    let z_ref = z.to_vector();
    let found: Vec<Option<DVector<f64>>> = (0..opts.n_probe)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
            let mut v = z_ref.clone();
            for k in 0..n + 3 {
                let rad = if k < n { box_r } else { time_r };
                if rad > 0.0 {
                    v[k] += rng.random_range(-rad..=rad);
                }
            }
            let probe = ExtremalStructure::from_vector(&v, z.u1, z.u2);
            newton_core(prob, &record.r, &probe, &core).ok().map(|rec| rec.z())
        })
        .collect();
    let n_converged = found.iter().filter(|f| f.is_some()).count();
    let mut clusters = vec![z_ref.clone()];
    for sol in found.into_iter().flatten() {
        let near = (0..n + 3).all(|k| {
            let rad = if k < n { box_r } else { time_r };
            (sol[k] - z_ref[k]).abs() <= 2.0 * rad
        });
        if !near {
            continue;
        }
        if clusters.iter().all(|c| (&sol - c).amax() > opts.distinct_tol) {
            zeros.push(ExtremalStructure::from_vector(&sol, z.u1, z.u2));
            clusters.push(sol);
        }
    }
    UniquenessReport {
        n_zeros_found: clusters.len(),
        n_probes: opts.n_probe,
        n_converged,
        zeros,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems_io::builtin;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn dubins() -> CompiledProblem {
        builtin("dubins").unwrap().compile().unwrap()
    }

    fn nominal() -> ExtremalStructure {
        ExtremalStructure {
            omega: vec![1.0, 0.0, -1.0],
            tau1: FRAC_PI_2,
            tau2: FRAC_PI_2 + 8.0,
            t_final: 8.0 + PI,
            u1: -1.0,
            u2: -1.0,
        }
    }

    fn fd_jacobian(prob: &CompiledProblem, r: &[f64], z: &ExtremalStructure, opts: &IntegratorOptions) -> (DMatrix<f64>, DMatrix<f64>) {
        let h = 1e-6;
        let zv = z.to_vector();
        let dim = zv.len();
        let mut dz = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let mut zp = zv.clone();
            let mut zm = zv.clone();
            zp[j] += h;
            zm[j] -= h;
            let fp = residual(prob, r, &ExtremalStructure::from_vector(&zp, z.u1, z.u2), opts)
                .unwrap()
                .to_vector();
            let fm = residual(prob, r, &ExtremalStructure::from_vector(&zm, z.u1, z.u2), opts)
                .unwrap()
                .to_vector();
            dz.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        let mut dr = DMatrix::zeros(dim, r.len());
        for k in 0..r.len() {
            let mut rp = r.to_vec();
            let mut rm = r.to_vec();
            rp[k] += h;
            rm[k] -= h;
            let fp = residual(prob, &rp, z, opts).unwrap().to_vector();
            let fm = residual(prob, &rm, z, opts).unwrap().to_vector();
            dr.set_column(k, &((fp - fm) / (2.0 * h)));
        }
        (dz, dr)
    }

    fn assert_close(a: &DMatrix<f64>, b: &DMatrix<f64>, rel: f64) {
        let scale = b.amax().max(1.0);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= rel * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn nominal_residual_vanishes() {
        let res = residual(&dubins(), &[0.0, 0.0], &nominal(), &IntegratorOptions::with_tol(1e-12)).unwrap();
        assert!(res.norm() < 1e-9, "{res:?}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let prob = dubins();
        let opts = IntegratorOptions::with_tol(1e-13);
        let mut z = nominal();
        z.omega = vec![1.01, 0.02, -0.97];
        z.tau1 += 0.03;
        let r = [0.01, -0.02];
        let jac = jacobian(&prob, &r, &z, &opts).unwrap();
        let (dz, dr) = fd_jacobian(&prob, &r, &z, &opts);
        assert_close(&jac.dz, &dz, 1e-5);
        assert_close(&jac.dr, &dr, 1e-5);
        for row in 3..6 {
            assert_eq!(jac.dz[(row, 4)], 0.0);
            assert_eq!(jac.dz[(row, 5)], 0.0);
        }
    }

    #[test]
    fn nominal_jacobian_is_well_conditioned() {
        let jac = jacobian(&dubins(), &[0.0, 0.0], &nominal(), &IntegratorOptions::with_tol(1e-12)).unwrap();
        assert!(condition_number(&jac.dz) < 1e6);
    }

    #[test]
    fn newton_recovers_nominal() {
        let prob = dubins();
        let zs = nominal().to_vector();
        let z0 = ExtremalStructure::from_vector(&zs.map(|v| v + 1e-3), -1.0, -1.0);
        let rec = newton_solve(&prob, &[0.0, 0.0], &z0, &ShootingOptions::default()).unwrap();
        assert!(rec.iterations <= 5, "{} iterations", rec.iterations);
        assert!((rec.z() - zs).amax() < 1e-9);
        assert!(rec.passed());
    }

    #[test]
    fn newton_rejects_broken_structure() {
        let mut z0 = nominal();
        std::mem::swap(&mut z0.tau1, &mut z0.tau2);
        let err = newton_solve(&dubins(), &[0.0, 0.0], &z0, &ShootingOptions::default()).unwrap_err();
        assert!(matches!(err, Error::StructureBroken(_)));
    }

    #[test]
    fn single_point_path_matches_newton() {
        let prob = dubins();
        let opts = ShootingOptions::default();
        let path = continue_path(&prob, &[vec![0.0, 0.0]], &nominal(), &opts).unwrap();
        let rec = newton_solve(&prob, &[0.0, 0.0], &nominal(), &opts).unwrap();
        assert_eq!(path.records, vec![rec]);
    }

    #[test]
    fn first_order_prediction_error_is_quadratic() {
        let prob = dubins();
        let opts = ShootingOptions {
            certify: false,
            ..Default::default()
        };
        let rec = newton_solve(&prob, &[0.0, 0.0], &nominal(), &opts).unwrap();
        let err = |h: f64| {
            let r = [h, 0.5 * h];
            residual(&prob, &r, &predict(&rec, &r), &opts.integrator).unwrap().norm()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_box_is_trivially_unique() {
        let prob = dubins();
        let rec = newton_solve(&prob, &[0.0, 0.0], &nominal(), &ShootingOptions::default()).unwrap();
        let opts = UniquenessOptions {
            box_radius: Some(0.0),
            ..Default::default()
        };
        assert_eq!(uniqueness_scan(&prob, &rec, &opts, &ShootingOptions::default()).n_zeros_found, 1);
    }
}
