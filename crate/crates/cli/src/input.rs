//! CSV ingestion: a node roster and two edge lists.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use netperm_core::network::BuildStats;
use netperm_core::{build_network, DesignPlan, NodeRecord, TemporalNetwork};

use crate::error::{CliError, CliResult};

const NODE_COLUMNS: [&str; 3] = ["node_id", "office", "new_hire"];

fn reader(path: &Path) -> CliResult<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn parse_flag(text: &str) -> Option<bool> {
    match text.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" | "" => Some(false),
        _ => None,
    }
}

pub fn load_nodes(path: &Path) -> CliResult<Vec<NodeRecord>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    let mut at = [0usize; 3];
    for (slot, name) in at.iter_mut().zip(NODE_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::validation(format!("{}: missing header column `{name}`", path.display())))?;
    }
    let covariates: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !NODE_COLUMNS.contains(h))
        .map(|(k, h)| (k, h.to_string()))
        .collect();

    let mut nodes = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |msg: String| CliError::validation(format!("{} line {line}: {msg}", path.display()));
        let id = &row[at[0]];
        if id.is_empty() {
            return Err(fail("empty node_id".into()));
        }
        let office = &row[at[1]];
        let new_hire =
            parse_flag(&row[at[2]]).ok_or_else(|| fail(format!("cannot read new_hire `{}`", &row[at[2]])))?;
        if new_hire && office.is_empty() {
            return Err(fail(format!("new hire `{id}` has no office")));
        }
        let mut record = NodeRecord::new(id);
        record.new_hire = new_hire;
        record.office = (!office.is_empty()).then(|| office.to_string());
        for (k, name) in &covariates {
            let cell = &row[*k];
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| fail(format!("covariate `{name}` is not numeric: `{cell}`")))?;
            record.covariates.insert(name.clone(), v);
        }
        nodes.push(record);
    }
    Ok(nodes)
}

pub fn load_edges(path: &Path, known: &HashSet<&str>) -> CliResult<Vec<(String, String)>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::validation(format!("{}: missing header column `{name}`", path.display())))
    };
    let (src, dst) = (col("src")?, col("dst")?);
    let mut edges = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let line = row.position().map_or(0, |p| p.line());
        let (a, b) = (&row[src], &row[dst]);
        for v in [a, b] {
            if !known.contains(v) {
                return Err(CliError::validation(format!(
                    "{} line {line}: unknown node `{v}`",
                    path.display()
                )));
            }
        }
        if a == b {
            return Err(CliError::validation(format!(
                "{} line {line}: self-loop on `{a}`",
                path.display()
            )));
        }
        edges.push((a.to_string(), b.to_string()));
    }
    Ok(edges)
}

/// Load and validate the roster and both snapshots; derives the office
/// strata.
pub fn load_inputs(
    nodes: &Path,
    edges_t1: &Path,
    edges_t2: &Path,
    seed: u64,
) -> CliResult<(TemporalNetwork, DesignPlan, BuildStats)> {
    let roster = load_nodes(nodes)?;
    let known: HashSet<&str> = roster.iter().map(|n| n.id.as_str()).collect();
    let e1 = load_edges(edges_t1, &known)?;
    let e2 = load_edges(edges_t2, &known)?;
    let (net, stats) = build_network(roster, &e1, &e2)?;
    let plan = DesignPlan::from_network(&net, seed)?;
    let hires: usize = plan.offices.iter().map(|o| o.hires.len()).sum();
    let mut per_office = BTreeMap::new();
    for o in &plan.offices {
        per_office.insert(o.office_id.as_str(), o.hires.len());
    }
    log::info!(
        "loaded {} nodes ({hires} new hires in {} offices), {} + {} edges",
        net.n(),
        plan.offices.len(),
        e1.len() - stats.duplicate_edges_t1,
        e2.len() - stats.duplicate_edges_t2
    );
    if stats.duplicate_edges_t1 + stats.duplicate_edges_t2 > 0 {
        log::info!(
            "dropped {} duplicate edges in t1 and {} in t2",
            stats.duplicate_edges_t1,
            stats.duplicate_edges_t2
        );
    }
    log::debug!("hires per office: {per_office:?}");
    Ok((net, plan, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn one_office_two_hires() {
        let dir = tempfile::tempdir().unwrap();
        let n = file(
            &dir,
            "n.csv",
            "node_id,office,new_hire,female\r\na,NY-2016,1,1\r\nb,NY-2016,1,\r\nc,,0,0\r\nd,,0,1\r\n",
        );
        let e1 = file(&dir, "e1.csv", "src,dst\na,c\nb,d\na,c\n");
        let e2 = file(&dir, "e2.csv", "src,dst\na,d\n");
        let (net, plan, stats) = load_inputs(&n, &e1, &e2, 0).unwrap();
        assert_eq!(plan.offices.len(), 1);
        assert_eq!(plan.offices[0].hires.len(), 2);
        assert_eq!(stats.duplicate_edges_t1, 1);
        let b = net.index_of("b").unwrap();
        assert!(!net.node(b).covariates.contains_key("female"));
    }

    #[test]
    fn hire_without_office_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let n = file(&dir, "n.csv", "node_id,office,new_hire\na,X,1\nb,,1\n");
        let err = load_nodes(&n).unwrap_err();
        assert!(err.message.contains("line 3"), "{}", err.message);
        assert_eq!(err.code, 2);
    }

    #[test]
    fn malformed_rows_report_lines() {
        let dir = tempfile::tempdir().unwrap();
        let n = file(&dir, "n.csv", "node_id,office,new_hire\na,X,maybe\n");
        assert!(load_nodes(&n).unwrap_err().message.contains("line 2"));
        let n = file(&dir, "n2.csv", "node_id,office,new_hire\na,X,1\nb,X,1,extra\n");
        assert!(load_nodes(&n).is_err());
        let e = file(&dir, "e.csv", "src,dst\na,zz\n");
        let known: HashSet<&str> = ["a"].into_iter().collect();
        assert!(load_edges(&e, &known).unwrap_err().message.contains("line 2"));
    }
}
