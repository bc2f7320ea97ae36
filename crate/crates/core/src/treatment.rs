//! Per-pair treatment vectors `D_ij = (1, stat_1, ..., stat_k)` built from the
//! first snapshot.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::network::{density_of, NodeIdx, TemporalNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StatKind {
    IndirectCount,
    IndirectFlag,
    Degree,
    Density,
}

/// One requested statistic. A threshold binarizes with a strict `>`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetStat {
    pub kind: StatKind,
    pub binarize_threshold: Option<f64>,
}

impl NetStat {
    pub const fn new(kind: StatKind) -> Self {
        Self {
            kind,
            binarize_threshold: None,
        }
    }

    pub const fn binarized(kind: StatKind, threshold: f64) -> Self {
        Self {
            kind,
            binarize_threshold: Some(threshold),
        }
    }

    /// Parse one of the command-line names. `high_*` variants take an
    /// optional `:threshold` suffix (`high_degree:3`); without one, or with
    /// `:median`, the threshold is a `NaN` placeholder resolved by the caller.
    pub fn parse(name: &str) -> Result<Self> {
        if let Some((base, t)) = name.split_once(':') {
            let mut stat = Self::parse(base)?;
            if stat.binarize_threshold.is_none() {
                return Err(Error::InvalidArgument(alloc::format!(
                    "treatment `{base}` takes no threshold"
                )));
            }
            if t != "median" {
                let v: f64 = t
                    .parse()
                    .map_err(|_| Error::InvalidArgument(alloc::format!("cannot read threshold `{t}` in `{name}`")))?;
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "threshold in `{name}` must be finite"
                    )));
                }
                stat.binarize_threshold = Some(v);
            }
            return Ok(stat);
        }
        Ok(match name {
            "indirect_flag" => Self::new(StatKind::IndirectFlag),
            "indirect_count" => Self::new(StatKind::IndirectCount),
            "degree" => Self::new(StatKind::Degree),
            "density" => Self::new(StatKind::Density),
            "high_degree" => Self::binarized(StatKind::Degree, f64::NAN),
            "high_density" => Self::binarized(StatKind::Density, f64::NAN),
            "high_indirect_count" => Self::binarized(StatKind::IndirectCount, f64::NAN),
            other => return Err(Error::InvalidArgument(alloc::format!("unknown treatment `{other}`"))),
        })
    }

    pub fn label(&self) -> &'static str {
        match (self.kind, self.binarize_threshold.is_some()) {
            (StatKind::IndirectFlag, _) => "indirect_flag",
            (StatKind::IndirectCount, false) => "indirect_count",
            (StatKind::IndirectCount, true) => "high_indirect_count",
            (StatKind::Degree, false) => "degree",
            (StatKind::Degree, true) => "high_degree",
            (StatKind::Density, false) => "density",
            (StatKind::Density, true) => "high_density",
        }
    }

    /// Whether values can only be compared approximately.
    pub fn is_continuous(&self) -> bool {
        self.kind == StatKind::Density && self.binarize_threshold.is_none()
    }

    /// Whether the statistic depends on the row node only.
    pub fn is_row_level(&self) -> bool {
        matches!(self.kind, StatKind::Degree | StatKind::Density)
    }

    fn finish(&self, raw: f64) -> f64 {
        match self.binarize_threshold {
            _ if raw.is_nan() => f64::NAN,
            Some(t) => f64::from(u8::from(raw > t)),
            None => raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StatOptions {
    /// Count first-snapshot ties to other new hires toward degree and
    /// density of a node.
    pub count_hire_ties: bool,
}

impl Default for StatOptions {
    fn default() -> Self {
        Self { count_hire_ties: true }
    }
}

/// Dense `rows x cols x dim` array, row-major with the coefficient axis
/// innermost. Undefined entries are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentArray {
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f64>,
    labels: Vec<String>,
    continuous: Vec<bool>,
}

impl TreatmentArray {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        labels: Vec<String>,
        continuous: Vec<bool>,
        data: Vec<f64>,
    ) -> Result<Self> {
        let dim = labels.len();
        if continuous.len() != dim || data.len() != rows * cols * dim {
            return Err(Error::DimensionMismatch {
                expected: rows * cols * dim,
                got: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            dim,
            data,
            labels,
            continuous,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn labels(&self) -> &[String] {
        &self.labels
    }
    pub fn continuous(&self) -> &[bool] {
        &self.continuous
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let at = (i * self.cols + j) * self.dim;
        &self.data[at..at + self.dim]
    }

    pub fn is_defined(&self, i: usize, j: usize) -> bool {
        self.get(i, j).iter().all(|v| !v.is_nan())
    }

    /// Sub-array on the given row and column positions (in that order).
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols.len() * self.dim);
        for &i in rows {
            for &j in cols {
                data.extend_from_slice(self.get(i, j));
            }
        }
        Self {
            rows: rows.len(),
            cols: cols.len(),
            dim: self.dim,
            data,
            labels: self.labels.clone(),
            continuous: self.continuous.clone(),
        }
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let width = self.cols * self.dim;
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            data.extend_from_slice(&self.data[src * width..(src + 1) * width]);
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            dim: self.dim,
            data,
            labels: self.labels.clone(),
            continuous: self.continuous.clone(),
        }
    }
}

/// Build `D_ij` for all `(i, j)` in `rows x cols`.
pub fn treatment_matrix(
    net: &TemporalNetwork,
    spec: &[NetStat],
    rows: &[NodeIdx],
    cols: &[NodeIdx],
    opts: StatOptions,
) -> Result<TreatmentArray> {
    let n = net.n();
    for &v in rows.iter().chain(cols) {
        if v >= n {
            return Err(Error::NodeOutOfRange { index: v, n });
        }
    }
    {
        let mut in_rows = vec![false; n];
        for &i in rows {
            in_rows[i] = true;
        }
        if let Some(&j) = cols.iter().find(|&&j| in_rows[j]) {
            return Err(Error::InvalidDesign(alloc::format!(
                "node `{}` is both a row and a column",
                net.node(j).id
            )));
        }
    }
    for s in spec {
        if s.binarize_threshold.is_some_and(f64::is_nan) {
            return Err(Error::InvalidArgument(alloc::format!(
                "threshold for `{}` is unresolved",
                s.label()
            )));
        }
    }
    let dim = spec.len() + 1;
    let mut labels = vec!["intercept".to_string()];
    labels.extend(spec.iter().map(|s| s.label().to_string()));
    let mut continuous = vec![false];
    continuous.extend(spec.iter().map(NetStat::is_continuous));

    let width = cols.len() * dim;
    let mut data = vec![0.0; rows.len() * width];
    let needs_counts = spec
        .iter()
        .any(|s| matches!(s.kind, StatKind::IndirectCount | StatKind::IndirectFlag));

    let fill_row = |r: usize, out: &mut [f64], scratch: &mut Vec<u32>| {
        let i = rows[r];
        let adj = net.snapshot(crate::network::SnapshotId::First);
        if needs_counts {
            for &k in adj.neighbors(i) {
                for &j in adj.neighbors(k as usize) {
                    scratch[j as usize] += 1;
                }
            }
        }
        let local: Vec<u32>;
        let nbrs: &[u32] = if opts.count_hire_ties {
            adj.neighbors(i)
        } else {
            local = adj
                .neighbors(i)
                .iter()
                .copied()
                .filter(|&k| !net.node(k as usize).new_hire)
                .collect();
            &local
        };
        let deg = nbrs.len() as f64;
        let dens = density_of(adj, nbrs).unwrap_or(f64::NAN);
        for (c, &j) in cols.iter().enumerate() {
            let cell = &mut out[c * dim..(c + 1) * dim];
            cell[0] = 1.0;
            for (s, stat) in spec.iter().enumerate() {
                let raw = match stat.kind {
                    StatKind::IndirectCount => f64::from(scratch[j]),
                    StatKind::IndirectFlag => f64::from(u8::from(scratch[j] > 0)),
                    StatKind::Degree => deg,
                    StatKind::Density => dens,
                };
                cell[s + 1] = stat.finish(raw);
            }
        }
        if needs_counts {
            for &k in adj.neighbors(i) {
                for &j in adj.neighbors(k as usize) {
                    scratch[j as usize] = 0;
                }
            }
        }
    };

    if width > 0 {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            data.par_chunks_mut(width).enumerate().for_each_init(
                || vec![0u32; if needs_counts { n } else { 0 }],
                |scratch, (r, out)| fill_row(r, out, scratch),
            );
        }
        #[cfg(not(feature = "parallel"))]
        {
            let mut scratch = vec![0u32; if needs_counts { n } else { 0 }];
            for (r, out) in data.chunks_mut(width).enumerate() {
                fill_row(r, out, &mut scratch);
            }
        }
    }

    Ok(TreatmentArray {
        rows: rows.len(),
        cols: cols.len(),
        dim,
        data,
        labels,
        continuous,
    })
}

/// Median of the multiset; the mean of the two middle values for even sizes.
pub fn median(values: &mut [f64]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let (_, &mut upper, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        return Some(upper);
    }
    let lower = values[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(0.5 * (lower + upper))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_thresholds() {
        assert_eq!(NetStat::parse("high_degree:3").unwrap().binarize_threshold, Some(3.0));
        assert!(NetStat::parse("high_density:median")
            .unwrap()
            .binarize_threshold
            .unwrap()
            .is_nan());
        assert!(NetStat::parse("degree:3").is_err());
        assert!(NetStat::parse("high_degree:x").is_err());
        assert!(NetStat::parse("high_degree:inf").is_err());
    }
    use crate::network::{build_network, NodeRecord};

    fn five() -> TemporalNetwork {
        let nodes = (1..=5).map(|i| NodeRecord::new(i.to_string())).collect();
        build_network(nodes, &[("1", "5"), ("5", "3")], &[] as &[(&str, &str)])
            .unwrap()
            .0
    }

    #[test]
    fn indirect_flag_matrix() {
        let net = five();
        let spec = [NetStat::new(StatKind::IndirectFlag)];
        // I = {1, 2}, J = {3, 4} in external ids
        let d = treatment_matrix(&net, &spec, &[0, 1], &[2, 3], StatOptions::default()).unwrap();
        assert_eq!(d.get(0, 0), &[1.0, 1.0]);
        assert_eq!(d.get(1, 0), &[1.0, 0.0]);
        assert_eq!(d.get(0, 1), &[1.0, 0.0]);
        assert_eq!(d.get(1, 1), &[1.0, 0.0]);
    }

    #[test]
    fn binarization_is_strict() {
        // a hub with exactly 75 neighbours
        let mut nodes: Vec<_> = (0..78).map(|i| NodeRecord::new(i.to_string())).collect();
        nodes[0] = NodeRecord::hire("0", "o");
        let edges: Vec<_> = (2..77).map(|k| (0, k)).collect();
        let net = TemporalNetwork::from_index_edges(nodes, &edges, &[]).unwrap().0;
        let spec = [NetStat::binarized(StatKind::Degree, 75.0)];
        let d = treatment_matrix(&net, &spec, &[0], &[1], StatOptions::default()).unwrap();
        assert_eq!(d.get(0, 0), &[1.0, 0.0]);
        let spec = [NetStat::binarized(StatKind::Degree, 74.0)];
        let d = treatment_matrix(&net, &spec, &[0], &[1], StatOptions::default()).unwrap();
        assert_eq!(d.get(0, 0), &[1.0, 1.0]);
    }

    #[test]
    fn empty_spec_is_intercept_only() {
        let net = five();
        let d = treatment_matrix(&net, &[], &[0, 1], &[2, 3], StatOptions::default()).unwrap();
        assert_eq!(d.dim(), 1);
        assert!(d.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn undefined_density_is_nan() {
        let net = five();
        let spec = [NetStat::new(StatKind::Density)];
        let d = treatment_matrix(&net, &spec, &[0], &[2], StatOptions::default()).unwrap();
        assert!(!d.is_defined(0, 0));
    }

    #[test]
    fn overlapping_rows_and_cols_rejected() {
        let net = five();
        let err = treatment_matrix(&net, &[], &[0, 1], &[1], StatOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidDesign(_)));
    }

    #[test]
    fn hire_ties_can_be_excluded_from_degree() {
        let nodes = vec![
            NodeRecord::hire("a", "o"),
            NodeRecord::hire("b", "o"),
            NodeRecord::new("s"),
            NodeRecord::new("t"),
        ];
        let net = TemporalNetwork::from_index_edges(nodes, &[(0, 1), (0, 2)], &[])
            .unwrap()
            .0;
        let spec = [NetStat::new(StatKind::Degree)];
        let all = treatment_matrix(&net, &spec, &[0], &[3], StatOptions::default()).unwrap();
        let seniors = treatment_matrix(&net, &spec, &[0], &[3], StatOptions { count_hire_ties: false }).unwrap();
        assert_eq!(all.get(0, 0)[1], 2.0);
        assert_eq!(seniors.get(0, 0)[1], 1.0);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
