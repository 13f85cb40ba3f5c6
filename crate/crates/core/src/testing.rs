//! Random systems for property tests. Not part of the stable API.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;
use rand::Rng;

use crate::extremal::{grid, CompiledProblem, EndpointMap, ExtremalStructure};
use crate::geometry::{AffineSystem, CotangentPoint};
use crate::secondvar::{controllability_rank, singular_arc_from_point, SecondVarOptions, SingularArcData};
use crate::symexpr::parse;

fn coef<R: Rng>(rng: &mut R, eps: f64) -> f64 {
    rng.random_range(-eps..=eps)
}

/// Dubins dynamics with small smooth perturbations of size `eps`.
pub fn perturbed_dubins<R: Rng>(rng: &mut R, eps: f64) -> AffineSystem {
    let c: Vec<f64> = (0..6).map(|_| coef(rng, eps)).collect();
    let f0 = [
        format!("cos(x3) + r1 + ({:?})*x2", c[0]),
        format!("sin(x3) + r2 + ({:?})*sin(x1)", c[1]),
        format!("({:?})*x1 + ({:?})*x2*x2", c[2], c[3]),
    ];
    let f1 = ["0".to_string(), format!("({:?})*x3", c[4]), format!("1 + ({:?})*x1", c[5])];
    let f0: Vec<&str> = f0.iter().map(String::as_str).collect();
    let f1: Vec<&str> = f1.iter().map(String::as_str).collect();
    AffineSystem::parse(&f0, &f1, 2).expect("generated system parses")
}

/// A perturbed Dubins problem with the nominal endpoints and a guess near
/// the nominal solution.
pub fn perturbed_dubins_problem<R: Rng>(rng: &mut R, eps: f64) -> (CompiledProblem, ExtremalStructure) {
    let sys = perturbed_dubins(rng, eps);
    let ep = |items: [&str; 3]| EndpointMap::new(items.iter().map(|s| parse(s, 0, 2).unwrap()).collect(), 2).unwrap();
    let prob = CompiledProblem::new(
        "perturbed-dubins",
        sys,
        ep(["0", "0", "pi/2"]),
        ep(["10", "0", "-pi/2"]),
        -1.0,
        -1.0,
    )
    .expect("generated problem compiles");
    let z = ExtremalStructure {
        omega: vec![1.0 + coef(rng, 0.05), coef(rng, 0.05), -1.0 + coef(rng, 0.05)],
        tau1: FRAC_PI_2 + coef(rng, 0.05),
        tau2: FRAC_PI_2 + 8.0 + coef(rng, 0.05),
        t_final: 8.0 + PI + coef(rng, 0.05),
        u1: -1.0,
        u2: -1.0,
    };
    (prob, z)
}

/// Unicycle with quadratic cross-coupling and a state-dependent control
/// field. Long singular arcs of this family regularly carry conjugate
/// points, which makes it a useful source of non-coercive examples.
pub fn coupled_unicycle<R: Rng>(rng: &mut R) -> AffineSystem {
    let f0 = [
        format!("cos(x3) + ({:?})*x2*x2", coef(rng, 1.0)),
        format!("sin(x3) + ({:?})*x1*x1", coef(rng, 1.0)),
        format!("({:?})*x1 + ({:?})*x2", coef(rng, 1.5), coef(rng, 1.5)),
    ];
    let f1 = [
        format!("({:?})*x2", coef(rng, 0.5)),
        format!("({:?})*x1", coef(rng, 0.5)),
        "1".to_string(),
    ];
    let f0: Vec<&str> = f0.iter().map(String::as_str).collect();
    let f1: Vec<&str> = f1.iter().map(String::as_str).collect();
    AffineSystem::parse(&f0, &f1, 0).expect("generated system parses")
}

/// The normal covector on `S` over `x1` for a 3-state system:
/// `p ~ f1 x f01`, scaled so `F0 = 1`. `None` when that forces `F101 <= 0`
/// or the fields are degenerate.
pub fn singular_start(sys: &AffineSystem, r: &[f64], x1: &[f64]) -> Option<CotangentPoint> {
    assert_eq!(sys.dim(), 3, "singular_start is for 3-state systems");
    let v = |f: &crate::geometry::VectorField| f.eval(x1, r).ok().map(|d| Vector3::new(d[0], d[1], d[2]));
    let (f0, f1, f01) = (v(&sys.f0)?, v(&sys.f1)?, v(&sys.brackets.f01)?);
    let dir = f1.cross(&f01);
    let h0 = dir.dot(&f0);
    if h0.abs() < 1e-6 * dir.norm().max(1e-300) {
        return None;
    }
    let p = dir / h0;
    let l = CotangentPoint::from_slices(p.as_slice(), x1);
    let lv = sys.lift_values(&l, r).ok()?;
    (lv.f101 > 1e-3).then_some(l)
}

/// A bare singular arc of `coupled_unicycle`: start point and length.
pub struct RandomArc {
    pub sys: AffineSystem,
    pub l1: CotangentPoint,
    pub length: f64,
}

pub fn random_singular_arc<R: Rng>(rng: &mut R) -> Option<RandomArc> {
    let sys = coupled_unicycle(rng);
    let x1 = [coef(rng, 1.0), coef(rng, 1.0), coef(rng, 3.0)];
    let length = rng.random_range(0.5..10.0);
    let l1 = singular_start(&sys, &[], &x1)?;
    Some(RandomArc { sys, l1, length })
}

/// Largest transported-field magnitude `max(|c|, |g|)` accepted by
/// `conditioned_singular_arc`. Beyond this the fibre angle monitored by the
/// Hamiltonian test is compressed below any fixed tolerance.
pub const MAX_TRANSPORT_SCALE: f64 = 1e3;

/// Smallest accepted `min R / R(tau1)` along the arc.
pub const MIN_R_RATIO: f64 = 0.2;

/// Smallest accepted `R` anywhere on the arc. The covector is normalised by
/// `F0 = 1`, so this is a genuine scale; below it the piecewise-constant
/// QP converges too slowly to pass its own refinement check.
pub const MIN_R: f64 = 0.1;

/// Draws random arcs until one builds, has full controllability rank and is
/// numerically well conditioned: `R` stays away from zero and the
/// transported fields stay moderate.
pub fn conditioned_singular_arc<R: Rng>(rng: &mut R, opts: &SecondVarOptions, max_tries: usize) -> Option<(RandomArc, SingularArcData)> {
    for _ in 0..max_tries {
        let Some(arc) = random_singular_arc(rng) else { continue };
        let Ok(data) = singular_arc_from_point(&arc.sys, &[], &arc.l1, 0.0, arc.length, opts) else {
            continue;
        };
        let samples: Option<Vec<_>> = grid(0.0, arc.length, 201).into_iter().map(|t| data.sample(t).ok()).collect();
        let Some(samples) = samples else { continue };
        let r0 = samples[0].r;
        let r_min = samples.iter().map(|s| s.r).fold(f64::INFINITY, f64::min);
        let scale = samples.iter().map(|s| s.c.norm().max(s.g.norm())).fold(0.0, f64::max);
        let conditioned = r_min >= MIN_R_RATIO * r0 && r_min >= MIN_R && scale <= MAX_TRANSPORT_SCALE;
        if conditioned && controllability_rank(&data, opts).rank == 3 {
            return Some((arc, data));
        }
    }
    None
}
