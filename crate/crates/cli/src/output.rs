//! Report rendering. JSON keeps full binary precision; CSV tables print
//! five decimals.

use std::io::Write;
use std::path::Path;

use netperm_core::inference::PermutationDistribution;
use netperm_core::pipeline::EstimateReport;

use crate::error::CliResult;

pub fn fixed5(x: f64) -> String {
    format!("{x:.5}")
}

fn opt5(x: Option<f64>) -> String {
    x.map(fixed5).unwrap_or_default()
}

pub fn report_json(report: &EstimateReport) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// One row per coefficient.
pub fn report_csv(report: &EstimateReport) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "outcome",
        "new_hires",
        "offices",
        "edges",
        "coefficient",
        "estimate",
        "se",
        "p_one_sided",
        "p_two_sided",
        "ci_low",
        "ci_high",
        "bonferroni_reject",
    ])?;
    for c in &report.coefficients {
        w.write_record([
            report.outcome.clone(),
            report.new_hires.to_string(),
            report.offices.to_string(),
            report.edges.to_string(),
            c.name.clone(),
            fixed5(c.estimate),
            opt5(c.se),
            fixed5(c.p_one_sided),
            fixed5(c.p_two_sided),
            opt5(c.ci.map(|ci| ci.0)),
            opt5(c.ci.map(|ci| ci.1)),
            c.bonferroni_reject.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

pub fn drops_csv(report: &EstimateReport) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["office", "reason", "units", "pairs"])?;
    for d in &report.drops {
        w.write_record([
            d.office_id.clone(),
            d.reason.code().to_string(),
            d.units.to_string(),
            d.pairs.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

/// Raw permutation draws of one coefficient, full precision.
pub fn histogram_csv(dist: &PermutationDistribution, coordinate: usize) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["draw_index", "statistic"])?;
    for (k, v) in dist.coordinate(coordinate).iter().enumerate() {
        w.write_record([k.to_string(), v.to_string()])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

/// Write to `path`, or stdout when absent.
pub fn emit(path: Option<&Path>, body: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, body)?,
        None => std::io::stdout().lock().write_all(body.as_bytes())?,
    }
    Ok(())
}
