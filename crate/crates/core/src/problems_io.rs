//! Problem files, built-in problems and result persistence.
//!
//! Problems and results are JSON documents carrying a `schema_version`.
//! Struct fields serialise in declaration order, so output is stable.
//! Floats round-trip exactly; non-finite values are written as the strings
//! `"inf"`, `"-inf"` and `"nan"`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::extremal::{assemble, BsbExtremal, CompiledProblem, EndpointMap, ExtremalStructure};
use crate::geometry::AffineSystem;
use crate::shooting::{ContinuationRecord, ShootingOptions};
use crate::symexpr::parse;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Initial guess for `(omega, tau1, tau2, T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialGuess {
    pub omega: Vec<f64>,
    pub tau1: f64,
    pub tau2: f64,
    pub t_final: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProblemOptions {
    /// Overrides the default SGLC threshold.
    pub tol_sglc: Option<f64>,
    pub shooting: ShootingOptions,
}

/// A problem as written in a problem file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemDefinition {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub name: String,
    pub n: usize,
    pub m: usize,
    /// Drift components in `x1..xn`, `r1..rm`.
    pub f0: Vec<String>,
    pub f1: Vec<String>,
    /// Initial point, in `r1..rm` only.
    pub a: Vec<String>,
    /// Final point, in `r1..rm` only.
    pub b: Vec<String>,
    pub u1: f64,
    pub u2: f64,
    #[serde(default)]
    pub z0: Option<InitialGuess>,
    #[serde(default)]
    pub options: ProblemOptions,
}

impl ProblemDefinition {
    /// Checks dimensions, bang signs and that every expression parses.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version > SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "schema version {} is newer than supported ({SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n == 0 {
            return Err(Error::Validation("n must be positive".into()));
        }
        for (what, list) in [("f0", &self.f0), ("f1", &self.f1), ("a", &self.a), ("b", &self.b)] {
            if list.len() != self.n {
                return Err(Error::Validation(format!(
                    "`{what}` has {} components, expected n = {}",
                    list.len(),
                    self.n
                )));
            }
        }
        for (what, u) in [("u1", self.u1), ("u2", self.u2)] {
            if u != 1.0 && u != -1.0 {
                return Err(Error::Validation(format!("`{what}` must be +1 or -1, got {u}")));
            }
        }
        for (what, list, n_state) in [
            ("f0", &self.f0, self.n),
            ("f1", &self.f1, self.n),
            ("a", &self.a, 0),
            ("b", &self.b, 0),
        ] {
            for (i, text) in list.iter().enumerate() {
                parse(text, n_state, self.m).map_err(|source| Error::FieldParse {
                    field: format!("{what}[{}]", i + 1),
                    source,
                })?;
            }
        }
        if let Some(z) = &self.z0 {
            if z.omega.len() != self.n {
                return Err(Error::Validation(format!(
                    "initial covector has {} components, expected {}",
                    z.omega.len(),
                    self.n
                )));
            }
        }
        Ok(())
    }

    pub fn compile(&self) -> Result<CompiledProblem> {
        self.validate()?;
        let f0: Vec<&str> = self.f0.iter().map(String::as_str).collect();
        let f1: Vec<&str> = self.f1.iter().map(String::as_str).collect();
        let mut sys = AffineSystem::parse(&f0, &f1, self.m)?;
        if let Some(tol) = self.options.tol_sglc {
            sys = sys.with_tol_sglc(tol);
        }
        let endpoint = |list: &[String]| -> Result<EndpointMap> {
            let exprs = list.iter().map(|t| parse(t, 0, self.m)).collect::<Result<Vec<_>, _>>()?;
            EndpointMap::new(exprs, self.m)
        };
        CompiledProblem::new(self.name.clone(), sys, endpoint(&self.a)?, endpoint(&self.b)?, self.u1, self.u2)
    }

    pub fn initial_structure(&self) -> Option<ExtremalStructure> {
        self.z0.as_ref().map(|z| ExtremalStructure {
            omega: z.omega.clone(),
            tau1: z.tau1,
            tau2: z.tau2,
            t_final: z.t_final,
            u1: self.u1,
            u2: self.u2,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let def: ProblemDefinition = serde_json::from_str(text)?;
        def.validate()?;
        Ok(def)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

pub const BUILTIN_NAMES: [&str; 3] = ["dubins", "dubins-drift", "dodgem-stub"];

/// Dubins right-straight-right guess from `(0, 0, pi/2)` to `(xf, 0, hf)`
/// with unit turning radius.
fn rsr_guess(xf: f64, hf: f64) -> InitialGuess {
    let (cx, cy) = (xf + hf.sin(), -hf.cos());
    let dx = cx - 1.0;
    let theta_s = cy.atan2(dx);
    let straight = dx.hypot(cy);
    let tau1 = FRAC_PI_2 - theta_s;
    let tau2 = tau1 + straight;
    InitialGuess {
        omega: vec![theta_s.cos(), theta_s.sin(), theta_s.sin() - 1.0],
        tau1,
        tau2,
        t_final: tau2 + theta_s - hf,
    }
}

/// Built-in problems by name.
pub fn builtin(name: &str) -> Option<ProblemDefinition> {
    let dubins_f0 = strings(&["cos(x3) + r1", "sin(x3) + r2", "0"]);
    let base = |name: &str, m: usize, b: &[&str], z0: InitialGuess| ProblemDefinition {
        schema_version: SCHEMA_VERSION,
        name: name.to_string(),
        n: 3,
        m,
        f0: dubins_f0.clone(),
        f1: strings(&["0", "0", "1"]),
        a: strings(&["0", "0", "pi/2"]),
        b: strings(b),
        u1: -1.0,
        u2: -1.0,
        z0: Some(z0),
        options: ProblemOptions::default(),
    };
    let nominal = InitialGuess {
        omega: vec![1.0, 0.0, -1.0],
        tau1: FRAC_PI_2,
        tau2: FRAC_PI_2 + 8.0,
        t_final: 8.0 + PI,
    };
    match name {
        "dubins" => Some(base("dubins", 2, &["10", "0", "-pi/2"], nominal)),
        "dubins-drift" => Some(base("dubins-drift", 3, &["10 + r3", "0", "-pi/2"], nominal)),
        "dodgem-stub" => Some(base("dodgem-stub", 2, &["10", "0", "-0.2"], rsr_guess(10.0, -0.2))),
        _ => None,
    }
}

/// Reads a problem file, or returns the built-in of that name when no such
/// file exists.
pub fn load_problem(path_or_name: &str) -> Result<ProblemDefinition> {
    let path = Path::new(path_or_name);
    if path.is_file() {
        return ProblemDefinition::from_json(&fs::read_to_string(path)?);
    }
    builtin(path_or_name).ok_or_else(|| {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!(
                "`{path_or_name}` is neither a file nor a built-in problem ({})",
                BUILTIN_NAMES.join(", ")
            ),
        ))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub u: f64,
}

/// Sampled extremal at one parameter value, `samples_per_arc` points per arc.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub r: Vec<f64>,
    pub samples_per_arc: usize,
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn from_extremal(ext: &BsbExtremal, prob: &CompiledProblem, samples_per_arc: usize) -> Result<Self> {
        let samples = ext
            .sample(prob, samples_per_arc)?
            .into_iter()
            .map(|(t, l, u)| TrajectorySample {
                t,
                q: l.q.as_slice().to_vec(),
                p: l.p.as_slice().to_vec(),
                u,
            })
            .collect();
        Ok(Trajectory {
            r: ext.r.clone(),
            samples_per_arc,
            samples,
        })
    }

    pub fn from_record(rec: &ContinuationRecord, prob: &CompiledProblem, opts: &ShootingOptions, samples_per_arc: usize) -> Result<Self> {
        let ext = assemble(prob, &rec.r, &rec.structure, &opts.integrator)?;
        Self::from_extremal(&ext, prob, samples_per_arc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub generator: String,
    pub version: String,
    /// Seconds since the Unix epoch; the only field that varies between runs.
    pub created_unix: u64,
    pub command: String,
    pub options: ShootingOptions,
    /// Times are in problem time units and angles in radians.
    pub units: String,
}

impl Metadata {
    pub fn new(command: &str, options: ShootingOptions) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Metadata {
            generator: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix,
            command: command.to_string(),
            options,
            units: "problem time units; radians".to_string(),
        }
    }
}

/// Everything one run produced, with the problem that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub problem: ProblemDefinition,
    pub metadata: Metadata,
    pub records: Vec<ContinuationRecord>,
    pub trajectories: Vec<Trajectory>,
    /// Why a continuation stopped before the last requested parameter.
    pub stopped: Option<String>,
    /// Free-form extra results (sensitivity tables, scan reports).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl ResultBundle {
    pub fn new(problem: ProblemDefinition, metadata: Metadata) -> Self {
        ResultBundle {
            schema_version: SCHEMA_VERSION,
            problem,
            metadata,
            records: Vec::new(),
            trajectories: Vec::new(),
            stopped: None,
            extra: serde_json::Value::Null,
        }
    }
}

pub fn save_bundle(bundle: &ResultBundle, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(bundle)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ResultBundle> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// C-style `%.17g`.
pub fn format_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-4..17).contains(&exp) {
        let mant = strip_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mant}e{sign}{:02}", exp.abs());
    }
    let decimals = (16 - exp).max(0) as usize;
    strip_zeros(&format!("{x:.decimals$}")).to_string()
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// CSV text with header `t,q1..qn,p1..pn,u`.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.samples.first().map_or(0, |s| s.q.len());
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",q{i}");
    }
    for i in 1..=n {
        let _ = write!(out, ",p{i}");
    }
    out.push_str(",u\n");
    for s in &traj.samples {
        out.push_str(&format_g17(s.t));
        for v in s.q.iter().chain(&s.p) {
            out.push(',');
            out.push_str(&format_g17(*v));
        }
        out.push(',');
        out.push_str(&format_g17(s.u));
        out.push('\n');
    }
    out
}

/// Writes one CSV per trajectory. A single trajectory goes to `path`;
/// several go to `<stem>_<k>.<ext>`. Returns the paths written.
pub fn export_csv(bundle: &ResultBundle, path: &Path) -> Result<Vec<PathBuf>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut written = Vec::new();
    let many = bundle.trajectories.len() > 1;
    for (k, traj) in bundle.trajectories.iter().enumerate() {
        let target = if many {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectory");
            let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
            path.with_file_name(format!("{stem}_{k}.{ext}"))
        } else {
            path.to_path_buf()
        };
        fs::write(&target, trajectory_csv(traj))?;
        written.push(target);
    }
    Ok(written)
}

/// Serde adapter for floats that may be infinite or NaN.
pub mod ext_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => match s.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!("invalid float `{other}`"))),
            },
        }
    }

    /// The same for `[f64; 3]`.
    pub mod array3 {
        use serde::ser::SerializeTuple;
        use serde::{Deserialize, Deserializer, Serializer};

        #[derive(serde::Serialize)]
        struct W(#[serde(with = "super")] f64);

        #[derive(Deserialize)]
        struct R(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(x: &[f64; 3], s: S) -> Result<S::Ok, S::Error> {
            let mut t = s.serialize_tuple(3)?;
            for v in x {
                t.serialize_element(&W(*v))?;
            }
            t.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
            let [a, b, c] = <[R; 3]>::deserialize(d)?;
            Ok([a.0, b.0, c.0])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::IntegratorOptions;

    #[test]
    fn dubins_builtin_fields() {
        let d = builtin("dubins").unwrap();
        assert_eq!((d.n, d.m), (3, 2));
        assert_eq!(d.f0, ["cos(x3) + r1", "sin(x3) + r2", "0"]);
        assert_eq!((d.u1, d.u2), (-1.0, -1.0));
        let z = d.z0.unwrap();
        assert_eq!(z.omega, [1.0, 0.0, -1.0]);
        assert_eq!(z.t_final, 8.0 + PI);
        for name in BUILTIN_NAMES {
            builtin(name).unwrap().compile().unwrap();
        }
    }

    #[test]
    fn rsr_guess_reproduces_nominal() {
        let g = rsr_guess(10.0, -FRAC_PI_2);
        let z = builtin("dubins").unwrap().z0.unwrap();
        for (a, b) in g.omega.iter().zip(&z.omega) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((g.tau1 - z.tau1).abs() < 1e-15);
        assert!((g.tau2 - z.tau2).abs() < 1e-14);
        assert!((g.t_final - z.t_final).abs() < 1e-14);
    }

    #[test]
    fn empty_drift_is_rejected() {
        let mut d = builtin("dubins").unwrap();
        d.f0.clear();
        assert!(matches!(d.validate(), Err(Error::Validation(_))));
        let mut d = builtin("dubins").unwrap();
        d.u2 = 0.5;
        assert!(matches!(d.compile(), Err(Error::Validation(_))));
    }

    #[test]
    fn parse_errors_carry_position() {
        let mut d = builtin("dubins").unwrap();
        d.f0[1] = "sin(x3 +".into();
        let err = d.validate().unwrap_err();
        assert!(
            matches!(&err, Error::FieldParse { field, source } if field == "f0[2]" && source.offset == 8),
            "{err}"
        );
        let mut d = builtin("dubins").unwrap();
        d.a[0] = "x1".into();
        assert!(d.validate().is_err());
    }

    #[test]
    fn problem_json_round_trip_is_idempotent() {
        let d = builtin("dubins-drift").unwrap();
        let text = d.to_json().unwrap();
        let back = ProblemDefinition::from_json(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn g17_formatting() {
        assert_eq!(format_g17(FRAC_PI_2), "1.5707963267948966");
        assert_eq!(format_g17(0.1), "0.10000000000000001");
        assert_eq!(format_g17(-1.0), "-1");
        assert_eq!(format_g17(0.0), "0");
        assert_eq!(format_g17(1e-7), "9.9999999999999995e-08");
        assert_eq!(format_g17(1e20), "1e+20");
        assert_eq!(format_g17(123456.5), "123456.5");
        assert_eq!(format_g17(1e16), "10000000000000000");
    }

    #[test]
    fn dubins_csv_first_row() {
        let d = builtin("dubins").unwrap();
        let prob = d.compile().unwrap();
        let z = d.initial_structure().unwrap();
        let ext = assemble(&prob, &[0.0, 0.0], &z, &IntegratorOptions::default()).unwrap();
        let traj = Trajectory::from_extremal(&ext, &prob, 16).unwrap();
        let csv = trajectory_csv(&traj);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,q1,q2,q3,p1,p2,p3,u");
        assert_eq!(lines[1], "0,0,0,1.5707963267948966,1,0,-1,-1");
        assert_eq!(lines.len(), 16 * 3 + 1);
    }

    #[test]
    fn ext_float_round_trip() {
        #[derive(Serialize, Deserialize)]
        struct S(#[serde(with = "ext_float")] f64, #[serde(with = "ext_float::array3")] [f64; 3]);
        let text = serde_json::to_string(&S(f64::NEG_INFINITY, [f64::NAN, 0.1, f64::INFINITY])).unwrap();
        let back: S = serde_json::from_str(&text).unwrap();
        assert_eq!(back.0, f64::NEG_INFINITY);
        assert!(back.1[0].is_nan());
        assert_eq!(back.1[1], 0.1);
        assert_eq!(back.1[2], f64::INFINITY);
    }
}
