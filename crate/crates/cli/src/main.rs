//! `singarc` command-line front end. Every subcommand is a thin composition
//! of library calls; see `singarc --help`.

mod report;

use report::out;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use singarc::extremal::{CompiledProblem, ExtremalStructure};
use singarc::problems_io::{export_csv, load_bundle, load_problem, save_bundle, Metadata, ProblemDefinition, ResultBundle, Trajectory};
use singarc::shooting::{continue_path, newton_solve, uniqueness_scan, ContinuationRecord, ShootingOptions, UniquenessOptions};

#[derive(Parser, Debug)]
#[command(name = "singarc", version, about = "Bang-singular-bang minimum-time extremals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the shooting equations and certify the extremal.
    Solve(Common),
    /// Solve, then print the full certificate.
    Certify(Common),
    /// Follow the extremal along a ray in parameter space.
    Continue {
        #[command(flatten)]
        common: Common,
        /// Ray as "direction;t_max;steps", e.g. "1,0;0.05;10".
        #[arg(long = "r-ray", value_name = "DIR;T_MAX;STEPS")]
        r_ray: Ray,
    },
    /// Solve and print dz/dr from the implicit-function formula.
    Sensitivity(Common),
    /// Count distinct extremals near the solution from random Newton starts.
    ScanUniqueness {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        /// Half-width of the covector box (default 0.1 |omega|).
        #[arg(long)]
        box_radius: Option<f64>,
    },
    /// Write the trajectories of a saved bundle as CSV.
    Export {
        /// Bundle written by another subcommand.
        #[arg(long)]
        bundle: PathBuf,
        /// CSV path (default: the bundle path with a .csv extension, inside
        /// --out when given).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, env = "SINGARC_OUT")]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Problem file, or a built-in name (dubins, dubins-drift, dodgem-stub).
    #[arg(long, default_value = "dubins")]
    problem: String,
    /// Directory for the JSON report and CSV trajectories.
    #[arg(long, env = "SINGARC_OUT")]
    out: Option<PathBuf>,
    /// Parameter vector "v1,v2,..." (default: zero).
    #[arg(long, value_parser = parse_params, allow_hyphen_values = true)]
    r: Option<Params>,
    /// Tolerance override KEY=VALUE; keys: newton, integrator, sglc, eig,
    /// kernel, drift. Repeatable.
    #[arg(long = "tol", value_name = "KEY=VALUE")]
    tol: Vec<TolOverride>,
    /// Trajectory samples per arc in the written report.
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

fn parse_vector(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect()
}

#[derive(Clone, Debug)]
struct Params(Vec<f64>);

fn parse_params(text: &str) -> Result<Params, String> {
    parse_vector(text).map(Params)
}

#[derive(Clone, Debug)]
struct Ray {
    direction: Vec<f64>,
    t_max: f64,
    steps: usize,
}

impl FromStr for Ray {
    type Err = String;

    fn from_str(text: &str) -> Result<Self, String> {
        let parts: Vec<&str> = text.split(';').collect();
        let [dir, t_max, steps] = parts[..] else {
            return Err(format!("expected \"direction;t_max;steps\", got `{text}`"));
        };
        let ray = Ray {
            direction: parse_vector(dir)?,
            t_max: t_max.trim().parse().map_err(|e| format!("t_max `{t_max}`: {e}"))?,
            steps: steps.trim().parse().map_err(|e| format!("steps `{steps}`: {e}"))?,
        };
        if ray.steps == 0 || !ray.t_max.is_finite() {
            return Err("the ray needs a finite t_max and at least one step".into());
        }
        Ok(ray)
    }
}

#[derive(Clone, Debug)]
struct TolOverride {
    key: String,
    value: f64,
}

const TOL_KEYS: [&str; 6] = ["newton", "integrator", "sglc", "eig", "kernel", "drift"];

impl FromStr for TolOverride {
    type Err = String;

    fn from_str(text: &str) -> Result<Self, String> {
        let (key, value) = text.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{text}`"))?;
        let key = key.trim();
        if !TOL_KEYS.contains(&key) {
            return Err(format!("unknown tolerance `{key}` (one of {})", TOL_KEYS.join(", ")));
        }
        let value: f64 = value.trim().parse().map_err(|e| format!("`{value}`: {e}"))?;
        if !(value.is_finite() && value > 0.0) {
            return Err(format!("tolerance `{key}` must be positive"));
        }
        Ok(TolOverride {
            key: key.to_string(),
            value,
        })
    }
}

/// A loaded problem with overrides applied.
struct Setup {
    def: ProblemDefinition,
    prob: CompiledProblem,
    opts: ShootingOptions,
    r: Vec<f64>,
    z0: ExtremalStructure,
    out: Option<PathBuf>,
    samples: usize,
}

impl Setup {
    fn new(common: &Common) -> Result<Self> {
        let mut def = load_problem(&common.problem)?;
        for t in &common.tol {
            let o = &mut def.options;
            match t.key.as_str() {
                "newton" => o.shooting.newton_tol = t.value,
                "integrator" => {
                    o.shooting.integrator.atol = t.value;
                    o.shooting.integrator.rtol = t.value;
                }
                "sglc" => o.tol_sglc = Some(t.value),
                "eig" => o.shooting.certification.secondvar.eig_tol = t.value,
                "kernel" => o.shooting.certification.secondvar.kernel_tol = t.value,
                "drift" => o.shooting.certification.drift_tol = t.value,
                _ => unreachable!("keys are checked while parsing"),
            }
        }
        let prob = def.compile()?;
        let r = common.r.as_ref().map_or_else(|| vec![0.0; def.m], |p| p.0.clone());
        if r.len() != def.m {
            bail!("--r has {} components but problem `{}` has {} parameters", r.len(), def.name, def.m);
        }
        let z0 = def
            .initial_structure()
            .ok_or_else(|| anyhow!("problem `{}` has no initial guess z0", def.name))?;
        Ok(Setup {
            opts: def.options.shooting,
            def,
            prob,
            r,
            z0,
            out: common.out.clone(),
            samples: common.samples,
        })
    }

    fn bundle(&self, command: &str, records: Vec<ContinuationRecord>) -> Result<ResultBundle> {
        let mut bundle = ResultBundle::new(self.def.clone(), Metadata::new(command, self.opts));
        for rec in &records {
            bundle
                .trajectories
                .push(Trajectory::from_record(rec, &self.prob, &self.opts, self.samples)?);
        }
        bundle.records = records;
        Ok(bundle)
    }

    /// Writes `<out>/<command>.json` and its CSV trajectories, if `--out`
    /// (or `SINGARC_OUT`) is set.
    fn write(&self, command: &str, bundle: &ResultBundle) -> Result<()> {
        let Some(dir) = &self.out else { return Ok(()) };
        let json = dir.join(format!("{command}.json"));
        save_bundle(bundle, &json).with_context(|| format!("writing {}", json.display()))?;
        out!("wrote {}", json.display());
        for path in export_csv(bundle, &dir.join(format!("{command}.csv")))? {
            out!("wrote {}", path.display());
        }
        Ok(())
    }
}

enum Outcome {
    Ok,
    /// Results computed and written, but a certificate failed.
    Uncertified,
}

fn certified(rec: &ContinuationRecord) -> Outcome {
    if rec.passed() {
        Outcome::Ok
    } else {
        Outcome::Uncertified
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Solve(common) => {
            let s = Setup::new(&common)?;
            let rec = newton_solve(&s.prob, &s.r, &s.z0, &s.opts)?;
            report::solution(&s.def.name, &rec);
            s.write("solve", &s.bundle("solve", vec![rec.clone()])?)?;
            Ok(certified(&rec))
        }
        Command::Certify(common) => {
            let s = Setup::new(&common)?;
            let rec = newton_solve(&s.prob, &s.r, &s.z0, &s.opts)?;
            report::solution(&s.def.name, &rec);
            if let Some(c) = &rec.certification {
                report::certificate(c);
            }
            s.write("certify", &s.bundle("certify", vec![rec.clone()])?)?;
            Ok(certified(&rec))
        }
        Command::Continue { common, r_ray } => {
            let s = Setup::new(&common)?;
            if r_ray.direction.len() != s.def.m {
                bail!(
                    "ray direction has {} components but the problem has {} parameters",
                    r_ray.direction.len(),
                    s.def.m
                );
            }
            let path: Vec<Vec<f64>> = (0..=r_ray.steps)
                .map(|k| {
                    let t = r_ray.t_max * k as f64 / r_ray.steps as f64;
                    s.r.iter().zip(&r_ray.direction).map(|(r0, d)| r0 + t * d).collect()
                })
                .collect();
            let cont = continue_path(&s.prob, &path, &s.z0, &s.opts)?;
            report::continuation(&cont.records, cont.stopped.as_deref());
            let complete = cont.records.len() == path.len() && cont.records.iter().all(|r| r.passed());
            let mut bundle = s.bundle("continue", cont.records)?;
            bundle.stopped = cont.stopped;
            s.write("continue", &bundle)?;
            Ok(if complete { Outcome::Ok } else { Outcome::Uncertified })
        }
        Command::Sensitivity(common) => {
            let s = Setup::new(&common)?;
            let rec = newton_solve(&s.prob, &s.r, &s.z0, &s.opts)?;
            report::solution(&s.def.name, &rec);
            report::sensitivity(&rec);
            s.write("sensitivity", &s.bundle("sensitivity", vec![rec.clone()])?)?;
            Ok(certified(&rec))
        }
        Command::ScanUniqueness {
            common,
            seed,
            probes,
            box_radius,
        } => {
            let s = Setup::new(&common)?;
            let rec = newton_solve(&s.prob, &s.r, &s.z0, &s.opts)?;
            report::solution(&s.def.name, &rec);
            let opts = UniquenessOptions {
                n_probe: probes,
                box_radius,
                seed,
                ..Default::default()
            };
            let scan = uniqueness_scan(&s.prob, &rec, &opts, &s.opts);
            report::uniqueness(&scan);
            let mut bundle = s.bundle("scan-uniqueness", vec![rec.clone()])?;
            bundle.extra = serde_json::json!({ "uniqueness": scan, "options": opts });
            s.write("scan-uniqueness", &bundle)?;
            Ok(match (certified(&rec), scan.n_zeros_found) {
                (Outcome::Ok, 1) => Outcome::Ok,
                _ => Outcome::Uncertified,
            })
        }
        Command::Export { bundle, csv, out } => {
            let loaded = load_bundle(&bundle).with_context(|| format!("reading {}", bundle.display()))?;
            let target = csv.unwrap_or_else(|| default_csv(&bundle, out.as_deref()));
            let written = export_csv(&loaded, &target)?;
            if written.is_empty() {
                bail!("{} holds no trajectories", bundle.display());
            }
            for path in written {
                out!("wrote {}", path.display());
            }
            Ok(Outcome::Ok)
        }
    }
}

fn default_csv(bundle: &Path, out: Option<&Path>) -> PathBuf {
    let name = bundle.with_extension("csv");
    match (out, name.file_name()) {
        (Some(dir), Some(file)) => dir.join(file),
        _ => name,
    }
}

/// The error chain joined with `: `, skipping causes whose text the
/// previous message already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors; usage errors exit 1
            // so that 2 keeps meaning "computed but not certified".
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Uncertified) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
