//! CSV rendering for run logs and evaluation tables.
//!
//! Floats use 17 significant digits in scientific notation, which round-trips
//! every f64 exactly and never depends on locale.

use std::fmt::Write as _;

use crate::eval::{EvalReport, SweepRow};
use crate::train::StepRecord;

pub const LOSSES_HEADER: &str = "iteration,l_vae,l_recon,l_kl,l_g,l_z,l_m,l_c";
pub const EVAL_HEADER: &str = "mean_manifold_distance,mean_log_density,recon_mse,branch_coverage,sample_count";
pub const SWEEP_HEADER: &str = "z,xi_index,x1,x2";
pub const COMPARE_HEADER: &str = "model,mean_manifold_distance,mean_log_density,recon_mse,branch_coverage,sample_count,density_ratio,manifold_distance_margin";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One `losses.csv` row. Wall time is left out so that logs of identical
/// runs are byte-identical.
pub fn losses_row(r: &StepRecord) -> String {
    let l = &r.losses;
    let mut out = r.iteration.to_string();
    for v in [l.l_vae, l.l_recon, l.l_kl, l.l_g, l.l_z, l.l_m, l.l_c] {
        out.push(',');
        out.push_str(&fmt_f64(v));
    }
    out
}

pub fn losses_csv(records: &[StepRecord]) -> String {
    let mut out = format!("{LOSSES_HEADER}\n");
    for r in records {
        out.push_str(&losses_row(r));
        out.push('\n');
    }
    out
}

fn eval_fields(r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{}",
        fmt_f64(r.mean_manifold_distance),
        fmt_f64(r.mean_log_density),
        fmt_f64(r.recon_mse),
        fmt_f64(r.branch_coverage),
        r.sample_count
    )
}

pub fn eval_csv(r: &EvalReport) -> String {
    format!("{EVAL_HEADER}\n{}\n", eval_fields(r))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(r.z),
            r.xi_index,
            fmt_f64(r.x[0]),
            fmt_f64(r.x[1])
        );
    }
    out
}

/// How the AVAE compares to the VAE on one test set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margins {
    /// `exp(mean log-density(avae) − mean log-density(vae))`.
    pub density_ratio: f64,
    /// `distance(vae) − distance(avae)`; positive when the AVAE is closer.
    pub manifold_distance_margin: f64,
}

pub fn margins(vae: &EvalReport, avae: &EvalReport) -> Margins {
    Margins {
        density_ratio: (avae.mean_log_density - vae.mean_log_density).exp(),
        manifold_distance_margin: vae.mean_manifold_distance - avae.mean_manifold_distance,
    }
}

/// Rows `vae` and `avae`; the VAE row holds the neutral margins 1 and 0.
pub fn compare_csv(vae: &EvalReport, avae: &EvalReport) -> String {
    let m = margins(vae, avae);
    format!(
        "{COMPARE_HEADER}\nvae,{},{},{}\navae,{},{},{}\n",
        eval_fields(vae),
        fmt_f64(1.0),
        fmt_f64(0.0),
        eval_fields(avae),
        fmt_f64(m.density_ratio),
        fmt_f64(m.manifold_distance_margin)
    )
}

/// Splits a CSV body into header fields and rows of fields.
pub fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let split = |l: &str| l.split(',').map(str::to_string).collect::<Vec<_>>();
    let header = lines.next().map(split).unwrap_or_default();
    (header, lines.filter(|l| !l.is_empty()).map(split).collect())
}
