//! Plain-text summaries printed to stdout.

/// `println!` that ignores a closed stdout, so piping into `head` is fine.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}
pub(crate) use out;

use singarc::extremal::CertificationReport;
use singarc::secondvar::CoercivityVerdict;
use singarc::shooting::{ContinuationRecord, UniquenessReport};

pub fn solution(problem: &str, rec: &ContinuationRecord) {
    let z = &rec.structure;
    out!("problem   {problem}");
    out!("r         {}", list(&rec.r));
    out!("omega     {}", fixed(&z.omega));
    out!("tau1      {:.10}", z.tau1);
    out!("tau2      {:.10}", z.tau2);
    out!("T         {:.10}", z.t_final);
    out!(
        "newton    {} iterations, residual {:.3e}, cond {:.3e}",
        rec.iterations,
        rec.residual_norm,
        rec.condition_number
    );
    match &rec.certification {
        Some(c) if c.pass => out!("certified PASS"),
        Some(c) => out!("certified FAIL ({})", c.failures.join("; ")),
        None => out!("certified (not run)"),
    }
}

pub fn certificate(c: &CertificationReport) {
    out!("");
    out!("{:<28} {:>14}", "check", "value");
    let rows = [
        ("bang 1 margin  min u1 F1", c.margin_bang1),
        ("bang 2 margin  min u2 F1", c.margin_bang2),
        ("SGLC margin    min F101", c.margin_sglc),
        ("junction 1", c.junction1),
        ("junction 2", c.junction2),
        ("sup |v| singular arc", c.sup_v),
        ("normality drift", c.normality_drift),
        ("max |F1| singular arc", c.max_abs_f1_singular),
        ("max |F01| singular arc", c.max_abs_f01_singular),
        ("smallest controllability sv", c.controllability_smallest_sv),
        ("injectivity margin", c.injectivity_margin),
    ];
    for (name, v) in rows {
        out!("{name:<28} {v:>14.6e}");
    }
    out!("{:<28} {:>14}", "controllability rank", c.controllability_rank);
    out!("{:<28} {:>14}", "coercivity (Hamiltonian)", verdict(&c.coercivity_hamiltonian));
    match &c.coercivity_qp {
        Some(q) => out!(
            "{:<28} {:>14}  min eig {:.4e} (coarse {:.4e}, richardson {})",
            "coercivity (quadratic form)",
            verdict(&q.verdict),
            q.min_eig,
            q.min_eig_coarse,
            if q.richardson_stable { "stable" } else { "unstable" }
        ),
        None => out!("{:<28} {:>14}", "coercivity (quadratic form)", "not run"),
    }
    let [s1, s2, s3] = c.switching_residuals;
    out!("switching residuals at first junction: F1 {s1:.3e}, F01 {s2:.3e}, F0-1 {s3:.3e}");
}

fn verdict(v: &CoercivityVerdict) -> String {
    let at = |t: &Option<f64>| t.map(|t| format!(" at t={t:.6}")).unwrap_or_default();
    match v {
        CoercivityVerdict::Coercive => "coercive".into(),
        CoercivityVerdict::NotCoercive { t_star } => format!("not coercive{}", at(t_star)),
        CoercivityVerdict::Marginal { t_star } => format!("marginal{}", at(t_star)),
        CoercivityVerdict::Failed { reason } => format!("failed: {reason}"),
    }
}

pub fn continuation(records: &[ContinuationRecord], stopped: Option<&str>) {
    out!(
        "{:>4}  {:<24} {:>14} {:>14} {:>14} {:>10}  cert",
        "k",
        "r",
        "tau1",
        "tau2",
        "T",
        "cond"
    );
    for (k, rec) in records.iter().enumerate() {
        let z = &rec.structure;
        out!(
            "{k:>4}  {:<24} {:>14.9} {:>14.9} {:>14.9} {:>10.3e}  {}",
            list(&rec.r),
            z.tau1,
            z.tau2,
            z.t_final,
            rec.condition_number,
            if rec.passed() { "PASS" } else { "FAIL" }
        );
    }
    if let Some(reason) = stopped {
        out!("stopped: {reason}");
    }
}

pub fn sensitivity(rec: &ContinuationRecord) {
    let n = rec.structure.omega.len();
    out!("");
    out!("dz/dr");
    for (i, row) in rec.sensitivity.iter().enumerate() {
        let label = match i.checked_sub(n) {
            None => format!("omega{}", i + 1),
            Some(0) => "tau1".into(),
            Some(1) => "tau2".into(),
            _ => "T".into(),
        };
        out!("{label:<8} {}", row.iter().map(|v| format!("{v:>14.6e}")).collect::<String>());
    }
}

pub fn uniqueness(scan: &UniquenessReport) {
    out!("");
    out!(
        "uniqueness: {} distinct extremal(s) from {} probes ({} converged)",
        scan.n_zeros_found,
        scan.n_probes,
        scan.n_converged
    );
    for (k, z) in scan.zeros.iter().enumerate().skip(1) {
        out!("  other zero {k}: tau1 {:.9}, tau2 {:.9}, T {:.9}", z.tau1, z.tau2, z.t_final);
    }
}

fn list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("({})", parts.join(", "))
}

fn fixed(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.10}")).collect();
    format!("({})", parts.join(", "))
}
