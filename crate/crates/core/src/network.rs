//! Two-snapshot undirected networks and the endogenous pair statistics
//! computed on the first snapshot.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub type NodeIdx = usize;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NodeRecord {
    pub id: String,
    pub office: Option<String>,
    pub new_hire: bool,
    /// Pre-determined covariates. Binary covariates are stored as 0/1.
    pub covariates: BTreeMap<String, f64>,
}

impl NodeRecord {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            office: None,
            new_hire: false,
            covariates: BTreeMap::new(),
        }
    }

    pub fn hire(id: impl Into<String>, office: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            office: Some(office.into()),
            new_hire: true,
            covariates: BTreeMap::new(),
        }
    }

    pub fn with_covariate(mut self, name: impl Into<String>, value: f64) -> Self {
        self.covariates.insert(name.into(), value);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotId {
    First,
    Second,
}

/// Sorted adjacency lists in compressed row form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl Adjacency {
    fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Self {
        let mut degree = vec![0usize; n];
        for &(a, b) in pairs {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets.clone();
        let mut neighbors = vec![0u32; offsets[n]];
        for &(a, b) in pairs {
            neighbors[fill[a]] = b as u32;
            fill[a] += 1;
            neighbors[fill[b]] = a as u32;
            fill[b] += 1;
        }
        for i in 0..n {
            neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Self { offsets, neighbors }
    }

    #[inline]
    pub fn neighbors(&self, i: NodeIdx) -> &[u32] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: NodeIdx) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn contains(&self, i: NodeIdx, j: NodeIdx) -> bool {
        self.neighbors(i).binary_search(&(j as u32)).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Each undirected edge once, as `(lo, hi)` in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (NodeIdx, NodeIdx)> + '_ {
        (0..self.offsets.len() - 1).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .map(|&j| j as usize)
                .filter(move |&j| j > i)
                .map(move |j| (i, j))
        })
    }
}

/// Counts reported by [`build_network`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub duplicate_edges_t1: usize,
    pub duplicate_edges_t2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalNetwork {
    nodes: Vec<NodeRecord>,
    index: BTreeMap<String, NodeIdx>,
    first: Adjacency,
    second: Adjacency,
}

/// Build a network from roster records and edge lists keyed by external id.
/// Internal indices follow roster order.
pub fn build_network<S: AsRef<str>>(
    nodes: Vec<NodeRecord>,
    edges1: &[(S, S)],
    edges2: &[(S, S)],
) -> Result<(TemporalNetwork, BuildStats)> {
    let index = roster_index(&nodes)?;
    let resolve = |edges: &[(S, S)]| -> Result<Vec<(usize, usize)>> {
        edges
            .iter()
            .map(|(a, b)| {
                let a = a.as_ref();
                let b = b.as_ref();
                let ia = *index.get(a).ok_or_else(|| Error::UnknownNode(a.to_string()))?;
                let ib = *index.get(b).ok_or_else(|| Error::UnknownNode(b.to_string()))?;
                Ok((ia, ib))
            })
            .collect()
    };
    let e1 = resolve(edges1)?;
    let e2 = resolve(edges2)?;
    TemporalNetwork::assemble(nodes, index, &e1, &e2)
}

fn roster_index(nodes: &[NodeRecord]) -> Result<BTreeMap<String, NodeIdx>> {
    let mut index = BTreeMap::new();
    for (i, node) in nodes.iter().enumerate() {
        if node.new_hire && node.office.is_none() {
            return Err(Error::MissingOffice(node.id.clone()));
        }
        if index.insert(node.id.clone(), i).is_some() {
            return Err(Error::DuplicateNode(node.id.clone()));
        }
    }
    Ok(index)
}

fn normalize_pairs(nodes: &[NodeRecord], pairs: &[(usize, usize)]) -> Result<(Vec<(usize, usize)>, usize)> {
    let n = nodes.len();
    let mut out = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        if a >= n || b >= n {
            return Err(Error::NodeOutOfRange { index: a.max(b), n });
        }
        if a == b {
            return Err(Error::SelfLoop(nodes[a].id.clone()));
        }
        out.push((a.min(b), a.max(b)));
    }
    out.sort_unstable();
    let before = out.len();
    out.dedup();
    let dups = before - out.len();
    Ok((out, dups))
}

impl TemporalNetwork {
    /// Build from internal index pairs (roster order).
    pub fn from_index_edges(
        nodes: Vec<NodeRecord>,
        edges1: &[(NodeIdx, NodeIdx)],
        edges2: &[(NodeIdx, NodeIdx)],
    ) -> Result<(Self, BuildStats)> {
        let index = roster_index(&nodes)?;
        Self::assemble(nodes, index, edges1, edges2)
    }

    fn assemble(
        nodes: Vec<NodeRecord>,
        index: BTreeMap<String, NodeIdx>,
        e1: &[(usize, usize)],
        e2: &[(usize, usize)],
    ) -> Result<(Self, BuildStats)> {
        let (p1, d1) = normalize_pairs(&nodes, e1)?;
        let (p2, d2) = normalize_pairs(&nodes, e2)?;
        let n = nodes.len();
        let net = Self {
            first: Adjacency::from_pairs(n, &p1),
            second: Adjacency::from_pairs(n, &p2),
            nodes,
            index,
        };
        Ok((
            net,
            BuildStats {
                duplicate_edges_t1: d1,
                duplicate_edges_t2: d2,
            },
        ))
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node(&self, i: NodeIdx) -> &NodeRecord {
        &self.nodes[i]
    }

    pub fn index_of(&self, id: &str) -> Option<NodeIdx> {
        self.index.get(id).copied()
    }

    pub fn snapshot(&self, which: SnapshotId) -> &Adjacency {
        match which {
            SnapshotId::First => &self.first,
            SnapshotId::Second => &self.second,
        }
    }

    fn check(&self, i: NodeIdx) -> Result<()> {
        if i < self.n() {
            Ok(())
        } else {
            Err(Error::NodeOutOfRange { index: i, n: self.n() })
        }
    }

    /// Number of common neighbours of `i` and `j` in the first snapshot.
    pub fn indirect_ties(&self, i: NodeIdx, j: NodeIdx) -> Result<u32> {
        self.check(i)?;
        self.check(j)?;
        if i == j {
            return Err(Error::SameNode(i));
        }
        Ok(sorted_intersection_count(
            self.first.neighbors(i),
            self.first.neighbors(j),
        ))
    }

    pub fn degree(&self, i: NodeIdx, which: SnapshotId) -> Result<usize> {
        self.check(i)?;
        Ok(self.snapshot(which).degree(i))
    }

    /// Share of unordered neighbour pairs of `i` (first snapshot) that are
    /// themselves tied. `None` when `i` has fewer than two neighbours.
    pub fn local_density(&self, i: NodeIdx) -> Result<Option<f64>> {
        self.check(i)?;
        Ok(density_of(&self.first, self.first.neighbors(i)))
    }

    /// Relabel the first snapshot: the result has `B[i][j] = A1[pi(i)][pi(j)]`.
    /// The roster and the second snapshot are unchanged.
    pub fn apply_permutation(&self, pi: &Permutation) -> Result<Self> {
        if pi.len() != self.n() {
            return Err(Error::NotBijection(format!(
                "permutation of length {} applied to {} nodes",
                pi.len(),
                self.n()
            )));
        }
        let inv = pi.inverse();
        let pairs: Vec<(usize, usize)> = self.first.edges().map(|(a, b)| (inv.apply(a), inv.apply(b))).collect();
        let (pairs, _) = normalize_pairs(&self.nodes, &pairs)?;
        Ok(Self {
            nodes: self.nodes.clone(),
            index: self.index.clone(),
            first: Adjacency::from_pairs(self.n(), &pairs),
            second: self.second.clone(),
        })
    }
}

pub(crate) fn sorted_intersection_count(a: &[u32], b: &[u32]) -> u32 {
    let (mut x, mut y, mut c) = (0, 0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            core::cmp::Ordering::Less => x += 1,
            core::cmp::Ordering::Greater => y += 1,
            core::cmp::Ordering::Equal => {
                c += 1;
                x += 1;
                y += 1;
            }
        }
    }
    c
}

/// Density over an explicit (sorted) neighbour set.
pub(crate) fn density_of(adj: &Adjacency, nbrs: &[u32]) -> Option<f64> {
    let k = nbrs.len();
    if k < 2 {
        return None;
    }
    let mut closed: u64 = 0;
    for &a in nbrs {
        closed += u64::from(sorted_intersection_count(adj.neighbors(a as usize), nbrs));
    }
    // each closed pair was counted from both endpoints
    let pairs = (k * (k - 1) / 2) as f64;
    Some((closed / 2) as f64 / pairs)
}

/// A bijection on `0..n`, with `apply(i) = pi(i)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn new(images: Vec<usize>) -> Result<Self> {
        let n = images.len();
        let mut seen = vec![false; n];
        for &v in &images {
            if v >= n || seen[v] {
                return Err(Error::NotBijection(format!("image {v} repeated or out of range")));
            }
            seen[v] = true;
        }
        Ok(Self(images))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn apply(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn images(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Self(inv)
    }

    /// `(self ∘ other)(i) = self(other(i))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self(other.0.iter().map(|&i| self.0[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five() -> TemporalNetwork {
        let nodes = (1..=5).map(|i| NodeRecord::new(i.to_string())).collect();
        build_network(nodes, &[("1", "5"), ("5", "3")], &[] as &[(&str, &str)])
            .unwrap()
            .0
    }

    #[test]
    fn build_stores_both_orientations() {
        let net = five();
        let a = net.snapshot(SnapshotId::First);
        assert!(a.contains(0, 4) && a.contains(4, 0));
        assert!(a.contains(4, 2) && a.contains(2, 4));
        assert_eq!(a.edge_count(), 2);
        assert_eq!(net.snapshot(SnapshotId::Second).edge_count(), 0);
    }

    #[test]
    fn self_loop_is_rejected() {
        let nodes = (1..=5).map(|i| NodeRecord::new(i.to_string())).collect();
        let err = build_network(nodes, &[("1", "1")], &[] as &[(&str, &str)]).unwrap_err();
        assert_eq!(err, Error::SelfLoop("1".into()));
    }

    #[test]
    fn reversed_duplicate_is_one_edge() {
        let nodes = (1..=5).map(|i| NodeRecord::new(i.to_string())).collect();
        let (net, stats) = build_network(nodes, &[("1", "5"), ("5", "1")], &[] as &[(&str, &str)]).unwrap();
        assert_eq!(net.snapshot(SnapshotId::First).edge_count(), 1);
        assert_eq!(stats.duplicate_edges_t1, 1);
    }

    #[test]
    fn unknown_and_duplicate_ids() {
        let nodes = vec![NodeRecord::new("a"), NodeRecord::new("b")];
        let err = build_network(nodes, &[("a", "z")], &[] as &[(&str, &str)]).unwrap_err();
        assert_eq!(err, Error::UnknownNode("z".into()));
        let nodes = vec![NodeRecord::new("a"), NodeRecord::new("a")];
        let err = build_network(nodes, &[] as &[(&str, &str)], &[]).unwrap_err();
        assert_eq!(err, Error::DuplicateNode("a".into()));
    }

    #[test]
    fn hire_without_office_is_rejected() {
        let mut rec = NodeRecord::new("h");
        rec.new_hire = true;
        let err = build_network(vec![rec], &[] as &[(&str, &str)], &[]).unwrap_err();
        assert_eq!(err, Error::MissingOffice("h".into()));
    }

    #[test]
    fn indirect_tie_counts() {
        let net = five();
        assert_eq!(net.indirect_ties(0, 2).unwrap(), 1);
        assert_eq!(net.indirect_ties(1, 2).unwrap(), 0);
        assert!(matches!(net.indirect_ties(0, 9), Err(Error::NodeOutOfRange { .. })));

        let nodes = (1..=6).map(|i| NodeRecord::new(i.to_string())).collect();
        let (net, _) = build_network(
            nodes,
            &[("1", "5"), ("5", "3"), ("1", "6"), ("6", "3")],
            &[] as &[(&str, &str)],
        )
        .unwrap();
        assert_eq!(net.indirect_ties(0, 2).unwrap(), 2);
    }

    #[test]
    fn degrees() {
        let net = five();
        assert_eq!(net.degree(4, SnapshotId::First).unwrap(), 2);
        assert_eq!(net.degree(1, SnapshotId::First).unwrap(), 0);
        let tri = TemporalNetwork::from_index_edges(
            vec![NodeRecord::new("a"), NodeRecord::new("b"), NodeRecord::new("c")],
            &[(0, 1), (1, 2), (0, 2)],
            &[],
        )
        .unwrap()
        .0;
        assert_eq!(tri.degree(0, SnapshotId::First).unwrap(), 2);
        assert_eq!(tri.local_density(0).unwrap(), Some(1.0));
    }

    #[test]
    fn densities() {
        let nodes: Vec<_> = (0..5).map(|i| NodeRecord::new(i.to_string())).collect();
        let star = TemporalNetwork::from_index_edges(nodes.clone(), &[(0, 1), (0, 2), (0, 3)], &[])
            .unwrap()
            .0;
        assert_eq!(star.local_density(0).unwrap(), Some(0.0));
        assert_eq!(star.local_density(1).unwrap(), None);
        let one_closed = TemporalNetwork::from_index_edges(nodes, &[(0, 1), (0, 2), (0, 3), (1, 2)], &[])
            .unwrap()
            .0;
        let d = one_closed.local_density(0).unwrap().unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn permutation_relabels_first_snapshot() {
        let net = five();
        // swap external ids 1 and 2 (indices 0 and 1)
        let pi = Permutation::new(vec![1, 0, 2, 3, 4]).unwrap();
        let swapped = net.apply_permutation(&pi).unwrap();
        let edges: Vec<_> = swapped.snapshot(SnapshotId::First).edges().collect();
        assert_eq!(edges, vec![(1, 4), (2, 4)]);
        let back = swapped.apply_permutation(&pi.inverse()).unwrap();
        assert_eq!(back, net);
        assert_eq!(net.apply_permutation(&Permutation::identity(5)).unwrap(), net);
    }

    #[test]
    fn non_bijection_rejected() {
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3]).is_err());
    }
}
