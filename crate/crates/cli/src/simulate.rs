//! Versioned world files and oracle exports.

use std::collections::BTreeSet;
use std::path::Path;

use netperm_core::synthlab::{OracleReport, SyntheticWorld, WorldConfig};
use netperm_core::{NodeIdx, NodeRecord, SnapshotId};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const WORLD_FORMAT: &str = "netperm-world";
pub const WORLD_VERSION: u32 = 1;

/// Everything needed to replay a world bit for bit. The second snapshot is
/// included for convenience and checked against the outcome rule on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub format: String,
    pub version: u32,
    pub config: WorldConfig,
    pub attempt: u32,
    pub thresholds: Vec<(String, Option<f64>)>,
    pub nodes: Vec<NodeRecord>,
    pub edges_t1: Vec<(String, String)>,
    pub edges_t2: Vec<(String, String)>,
    pub latent: Vec<f64>,
    /// Row-major `hires x candidates`, hires office by office in roster
    /// order, candidates in roster order.
    pub shocks: Vec<f64>,
}

fn named(world: &SyntheticWorld, which: SnapshotId) -> Vec<(String, String)> {
    let nodes = world.network.nodes();
    world
        .network
        .snapshot(which)
        .edges()
        .map(|(a, b)| (nodes[a].id.clone(), nodes[b].id.clone()))
        .collect()
}

impl WorldFile {
    pub fn from_world(world: &SyntheticWorld) -> Self {
        Self {
            format: WORLD_FORMAT.into(),
            version: WORLD_VERSION,
            config: world.config.clone(),
            attempt: world.attempt,
            thresholds: world
                .spec
                .iter()
                .map(|s| (s.label().to_string(), s.binarize_threshold))
                .collect(),
            nodes: world.network.nodes().to_vec(),
            edges_t1: named(world, SnapshotId::First),
            edges_t2: named(world, SnapshotId::Second),
            latent: world.latent.clone(),
            shocks: world.shocks.clone(),
        }
    }

    pub fn into_world(self) -> CliResult<SyntheticWorld> {
        if self.format != WORLD_FORMAT || self.version != WORLD_VERSION {
            return Err(CliError::validation(format!(
                "unsupported world file `{}` version {}",
                self.format, self.version
            )));
        }
        let index: std::collections::HashMap<String, NodeIdx> =
            self.nodes.iter().enumerate().map(|(k, n)| (n.id.clone(), k)).collect();
        let resolve = |(a, b): &(String, String)| -> CliResult<(NodeIdx, NodeIdx)> {
            let look = |v: &str| {
                index
                    .get(v)
                    .copied()
                    .ok_or_else(|| CliError::validation(format!("world file: unknown node `{v}`")))
            };
            Ok((look(a)?, look(b)?))
        };
        let e1 = self.edges_t1.iter().map(resolve).collect::<CliResult<Vec<_>>>()?;
        let world = SyntheticWorld::assemble(self.config, self.attempt, self.nodes, &e1, self.latent, self.shocks)?;
        let stored = self
            .edges_t2
            .iter()
            .map(|e| resolve(e).map(|(a, b)| (a.min(b), a.max(b))))
            .collect::<CliResult<BTreeSet<_>>>()?;
        let recomputed: BTreeSet<_> = world.network.snapshot(SnapshotId::Second).edges().collect();
        if stored != recomputed {
            return Err(CliError::validation(
                "world file: second snapshot disagrees with the outcome rule",
            ));
        }
        Ok(world)
    }
}

pub fn write_inputs(world: &SyntheticWorld, dir: &Path) -> CliResult<()> {
    let nodes = world.network.nodes();
    let covariates: BTreeSet<&String> = nodes.iter().flat_map(|n| n.covariates.keys()).collect();
    let mut w = csv::Writer::from_path(dir.join("nodes.csv"))?;
    let mut header = vec!["node_id".to_string(), "office".into(), "new_hire".into()];
    header.extend(covariates.iter().map(|c| c.to_string()));
    w.write_record(&header)?;
    for n in nodes {
        let mut row = vec![
            n.id.clone(),
            n.office.clone().unwrap_or_default(),
            u8::from(n.new_hire).to_string(),
        ];
        row.extend(
            covariates
                .iter()
                .map(|c| n.covariates.get(*c).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    for (name, which) in [
        ("edges_t1.csv", SnapshotId::First),
        ("edges_t2.csv", SnapshotId::Second),
    ] {
        let mut w = csv::Writer::from_path(dir.join(name))?;
        w.write_record(["src", "dst"])?;
        for (a, b) in named(world, which) {
            w.write_record([a, b])?;
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFile {
    pub format: String,
    pub version: u32,
    pub outcome: String,
    pub seed: u64,
    pub report: OracleReport,
}

/// Per-coefficient oracle summary at full precision.
pub fn oracle_csv(report: &OracleReport) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "coefficient",
        "realized_estimate",
        "enumerated_mean",
        "estimand",
        "estimator_variance",
        "mean_v_hat",
        "berry_esseen",
        "permutations",
    ])?;
    let show = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (k, label) in report.labels.iter().enumerate() {
        w.write_record([
            label.clone(),
            report.realized_estimate[k].to_string(),
            report.enumerated_mean[k].to_string(),
            report.estimand[k].to_string(),
            report.estimator_variance[k].to_string(),
            show(report.mean_v_hat.as_ref().map(|v| v[k])),
            show(report.berry_esseen[k]),
            report.group_order.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}
