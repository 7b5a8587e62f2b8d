//! Rendered run reports: the probe-sweep table, the embedding/loss ablation
//! grid, the component-swap table, and the headline metrics.

use super::steps::{AblationTableRow, ClusterComparison, MetricRow, SwapTableRow};
use super::{RunPaths, Step};
use crate::error::{Error, Result};
use crate::io;
use crate::probing::ProbeSweepResult;
use std::fmt::Write as _;

fn cell(v: Option<f64>) -> String {
    // absent metrics render as absent, never as zero
    match v {
        Some(x) => format!("{x:>9.4}"),
        None => format!("{:>9}", "-"),
    }
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        " "
    }
}

/// Render from in-memory tables (used by the eval step while writing
/// report.txt).
pub(crate) fn render_report_parts(
    metrics: &[MetricRow],
    swap_rows: &[SwapTableRow],
    ablation_rows: &[AblationTableRow],
    cluster: Option<&ClusterComparison>,
    paths: &RunPaths,
) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "== headline metrics ==").ok();
    writeln!(out, "{:<10} {:<12} {:>12}", "method", "metric", "value").ok();
    for r in metrics {
        writeln!(out, "{:<10} {:<12} {:>12.6}", r.method, r.metric, r.value).ok();
    }

    if let Some(c) = cluster {
        writeln!(out, "\n== clustering: e_core vs e_sem ==").ok();
        writeln!(
            out,
            "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "embedding", "ARI", "NMI", "AMI", "homog", "compl", "V"
        )
        .ok();
        for (name, r) in [("e_core", &c.e_core), ("e_sem", &c.e_sem)] {
            writeln!(
                out,
                "{:<14} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                name, r.ari, r.nmi, r.ami, r.homogeneity, r.completeness, r.v_measure
            )
            .ok();
        }
        writeln!(out, "e_core leads on {} of 6 metrics", c.core_dominates_on).ok();
    }

    let sweep_path = paths.step_dir(Step::ProbeSweep).join("sweep.json");
    if sweep_path.exists() {
        let sweep: ProbeSweepResult = io::read_json(&sweep_path)?;
        writeln!(out, "\n== probe sweep ==").ok();
        out.push_str(&sweep.render());
    }

    writeln!(out, "\n== embedding / loss ablation ==").ok();
    writeln!(
        out,
        "{:<5} {:<5} {:<6} {:<8} {} {} {} {} {}",
        "e_img",
        "e_sem",
        "e_core",
        "loss",
        format!("{:>9}", "cmmd"),
        format!("{:>9}", "clip"),
        format!("{:>9}", "style"),
        format!("{:>9}", "semantic"),
        format!("{:>9}", "prefdisc"),
    )
    .ok();
    for r in ablation_rows {
        writeln!(
            out,
            "{:<5} {:<5} {:<6} {:<8} {} {} {} {} {}",
            mark(r.e_img),
            mark(r.e_sem),
            mark(r.e_core),
            r.loss,
            cell(r.cmmd),
            cell(r.clip),
            cell(r.style),
            cell(r.semantic),
            cell(r.prefdisc),
        )
        .ok();
    }

    writeln!(out, "\n== component swap (user a <- user b) ==").ok();
    writeln!(
        out,
        "{:<8} {:>9} {:>9} {:>9} {:>9}",
        "swapped", "style", "semantic", "cmmd", "clip"
    )
    .ok();
    for r in swap_rows {
        writeln!(
            out,
            "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            r.swapped, r.style, r.semantic, r.cmmd, r.clip
        )
        .ok();
    }
    Ok(out)
}

/// Re-render the report for an existing run directory from its artifacts.
pub fn render_report(paths: &RunPaths) -> Result<String> {
    let eval_dir = paths.step_dir(Step::Eval);
    if !eval_dir.join("metrics.json").exists() {
        return Err(Error::MissingDependency(
            "eval artifacts missing; run the pipeline first".to_string(),
        ));
    }
    let metrics: Vec<MetricRow> = io::read_json(&eval_dir.join("metrics.json"))?;
    let swap_rows: Vec<SwapTableRow> = io::read_json(&eval_dir.join("swap.json"))?;
    let ablation_rows: Vec<AblationTableRow> =
        io::read_json(&eval_dir.join("ablation_table.json"))?;
    let cluster: Option<ClusterComparison> = if eval_dir.join("cluster.json").exists() {
        Some(io::read_json(&eval_dir.join("cluster.json"))?)
    } else {
        None
    };
    render_report_parts(&metrics, &swap_rows, &ablation_rows, cluster.as_ref(), paths)
}

/// Library entry for the CLI `report` command.
pub fn report(run_dir: &std::path::Path) -> Result<String> {
    if !run_dir.exists() {
        return Err(Error::validation(format!(
            "run directory {} does not exist",
            run_dir.display()
        )));
    }
    render_report(&RunPaths::new(run_dir))
}
