//! The within-office permutation group, assignment probabilities, and
//! support-validated estimation samples.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::SymFactor;
use crate::network::{NodeIdx, Permutation, TemporalNetwork};
use crate::treatment::TreatmentArray;

/// Default cap on the group order for exhaustive enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Default relative eigenvalue threshold for per-column Gram matrices.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OfficeDesign {
    pub office_id: String,
    /// Permuted new hires, in row order.
    pub hires: Vec<NodeIdx>,
    /// Candidate ties, in column order.
    pub candidates: Vec<NodeIdx>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DesignPlan {
    pub offices: Vec<OfficeDesign>,
    pub master_seed: u64,
}

impl DesignPlan {
    pub fn new(offices: Vec<OfficeDesign>, master_seed: u64) -> Result<Self> {
        let mut owner: BTreeMap<NodeIdx, usize> = BTreeMap::new();
        for (o, office) in offices.iter().enumerate() {
            if office.hires.is_empty() {
                return Err(Error::InvalidDesign(format!(
                    "office `{}` has no new hires",
                    office.office_id
                )));
            }
            for &i in &office.hires {
                if owner.insert(i, o).is_some() {
                    return Err(Error::InvalidDesign(format!(
                        "node {i} is a new hire in more than one office"
                    )));
                }
            }
        }
        for office in &offices {
            if let Some(&j) = office.candidates.iter().find(|j| owner.contains_key(j)) {
                return Err(Error::InvalidDesign(format!(
                    "candidate {j} of office `{}` is a new hire of office `{}`",
                    office.office_id, offices[owner[&j]].office_id
                )));
            }
        }
        Ok(Self { offices, master_seed })
    }

    /// One office per distinct office label among new hires (in order of first
    /// appearance); every node that is not a new hire is a candidate tie.
    pub fn from_network(net: &TemporalNetwork, master_seed: u64) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<NodeIdx>> = BTreeMap::new();
        let mut candidates = Vec::new();
        for (i, node) in net.nodes().iter().enumerate() {
            if node.new_hire {
                let office = node
                    .office
                    .clone()
                    .ok_or_else(|| Error::MissingOffice(node.id.clone()))?;
                groups
                    .entry(office.clone())
                    .or_insert_with(|| {
                        order.push(office);
                        Vec::new()
                    })
                    .push(i);
            } else {
                candidates.push(i);
            }
        }
        let offices = order
            .into_iter()
            .map(|id| OfficeDesign {
                hires: groups.remove(&id).unwrap_or_default(),
                candidates: candidates.clone(),
                office_id: id,
            })
            .collect();
        Self::new(offices, master_seed)
    }

    pub fn office_sizes(&self) -> Vec<usize> {
        self.offices.iter().map(|o| o.hires.len()).collect()
    }

    /// `prod_o m_o!`, or `None` if it overflows `u128`.
    pub fn group_order(&self) -> Option<u128> {
        group_order(&self.office_sizes())
    }

    /// Uniform draw from the group. A pure function of `(master_seed, draw)`.
    pub fn sample_permutation(&self, draw: u64) -> StratifiedPermutation {
        sample_stratified(&self.office_sizes(), self.master_seed, draw)
    }

    pub fn enumerate_group(&self, cap: u64) -> Result<GroupIter> {
        GroupIter::new(&self.office_sizes(), cap)
    }
}

pub(crate) fn group_order(sizes: &[usize]) -> Option<u128> {
    let mut order: u128 = 1;
    for &m in sizes {
        for k in 2..=m as u128 {
            order = order.checked_mul(k)?;
        }
    }
    Some(order)
}

pub(crate) fn sample_stratified(sizes: &[usize], seed: u64, draw: u64) -> StratifiedPermutation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    let offices = sizes
        .iter()
        .map(|&m| {
            let mut p: Vec<usize> = (0..m).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    StratifiedPermutation { offices }
}

/// An element of the within-office group, as one local permutation of row
/// positions per office: row `i` of office `o` takes the position of row
/// `offices[o][i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StratifiedPermutation {
    pub offices: Vec<Vec<usize>>,
}

impl StratifiedPermutation {
    pub fn identity(sizes: &[usize]) -> Self {
        Self {
            offices: sizes.iter().map(|&m| (0..m).collect()).collect(),
        }
    }

    /// Lift to a permutation of all `n` nodes (identity off the hire sets).
    pub fn to_node_permutation(&self, plan: &DesignPlan, n: usize) -> Result<Permutation> {
        if self.offices.len() != plan.offices.len() {
            return Err(Error::NotBijection("office count mismatch".into()));
        }
        let mut images: Vec<usize> = (0..n).collect();
        for (local, office) in self.offices.iter().zip(&plan.offices) {
            if local.len() != office.hires.len() {
                return Err(Error::NotBijection(format!(
                    "office `{}` has {} hires, permutation has {}",
                    office.office_id,
                    office.hires.len(),
                    local.len()
                )));
            }
            for (i, &p) in local.iter().enumerate() {
                images[office.hires[i]] = office.hires[p];
            }
        }
        Permutation::new(images)
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self {
            offices: self
                .offices
                .iter()
                .zip(&other.offices)
                .map(|(a, b)| b.iter().map(|&i| a[i]).collect())
                .collect(),
        }
    }

    pub fn inverse(&self) -> Self {
        Self {
            offices: self
                .offices
                .iter()
                .map(|p| {
                    let mut inv = vec![0; p.len()];
                    for (i, &v) in p.iter().enumerate() {
                        inv[v] = i;
                    }
                    inv
                })
                .collect(),
        }
    }
}

/// Exhaustive iterator over the group, starting at the identity.
#[derive(Debug, Clone)]
pub struct GroupIter {
    current: Option<StratifiedPermutation>,
    remaining: u128,
}

impl GroupIter {
    pub fn new(sizes: &[usize], cap: u64) -> Result<Self> {
        let order = group_order(sizes);
        match order {
            Some(k) if k <= u128::from(cap) => Ok(Self {
                current: Some(StratifiedPermutation::identity(sizes)),
                remaining: k,
            }),
            _ => Err(Error::CapExceeded {
                order: order.map_or_else(|| "> 2^128".to_string(), |k| k.to_string()),
                cap,
            }),
        }
    }

    pub fn order(&self) -> u128 {
        self.remaining
    }
}

impl Iterator for GroupIter {
    type Item = StratifiedPermutation;

    fn next(&mut self) -> Option<Self::Item> {
        let cur = self.current.take()?;
        let mut next = cur.clone();
        let mut advanced = false;
        for p in next.offices.iter_mut() {
            if next_lexicographic(p) {
                advanced = true;
                break;
            }
            // wrapped back to the identity; carry into the next office
        }
        if advanced {
            self.current = Some(next);
        }
        Some(cur)
    }
}

/// Advance to the next permutation in lexicographic order; on the last one,
/// reset to sorted order and return `false`.
fn next_lexicographic(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        p.reverse();
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

pub(crate) fn cmp_vectors(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// Distinct values of one column with their multiplicities.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSupport {
    pub values: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl ColumnSupport {
    pub fn rows(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn probability(&self, d: &[f64]) -> f64 {
        match self.values.binary_search_by(|v| cmp_vectors(v, d)) {
            Ok(k) => self.counts[k] as f64 / self.rows() as f64,
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, d: &[f64]) -> bool {
        self.values.binary_search_by(|v| cmp_vectors(v, d)).is_ok()
    }
}

/// Column-wise assignment probabilities `p_j(d)` and realized `P_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    pub columns: Vec<ColumnSupport>,
    /// `rows x cols`, row-major.
    pub realized: Vec<f64>,
}

pub fn assignment_probabilities(d: &TreatmentArray) -> Result<ProbabilityTable> {
    let (rows, cols) = (d.rows(), d.cols());
    if rows == 0 && cols > 0 {
        return Err(Error::EmptyColumn(0));
    }
    let mut columns = Vec::with_capacity(cols);
    let mut realized = vec![0.0; rows * cols];
    let mut order: Vec<usize> = Vec::with_capacity(rows);
    for j in 0..cols {
        order.clear();
        order.extend(0..rows);
        order.sort_by(|&a, &b| cmp_vectors(d.get(a, j), d.get(b, j)));
        let mut values = Vec::new();
        let mut counts = Vec::new();
        let mut start = 0;
        while start < rows {
            let v = d.get(order[start], j);
            let mut end = start + 1;
            while end < rows && cmp_vectors(d.get(order[end], j), v) == Ordering::Equal {
                end += 1;
            }
            let p = (end - start) as f64 / rows as f64;
            for &i in &order[start..end] {
                realized[i * cols + j] = p;
            }
            values.push(v.to_vec());
            counts.push(end - start);
            start = end;
        }
        columns.push(ColumnSupport { values, counts });
    }
    Ok(ProbabilityTable { columns, realized })
}

/// The multiset of treatment vectors in column `j`, sorted.
pub fn column_multiset(d: &TreatmentArray, j: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = (0..d.rows()).map(|i| d.get(i, j).to_vec()).collect();
    out.sort_by(|a, b| cmp_vectors(a, b));
    out
}

/// Row-major bit matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words: usize,
    bits: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words = cols.div_ceil(64);
        Self {
            rows,
            cols,
            words,
            bits: vec![0; rows * words],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        let w = &mut self.bits[i * self.words + j / 64];
        if v {
            *w |= 1 << (j % 64);
        } else {
            *w &= !(1 << (j % 64));
        }
    }

    /// Column positions of set bits in row `i`, ascending.
    pub fn row_ones(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.bits[i * self.words..(i + 1) * self.words];
        row.iter().enumerate().flat_map(|(w, &word)| {
            let mut word = word;
            core::iter::from_fn(move || {
                if word == 0 {
                    return None;
                }
                let b = word.trailing_zeros() as usize;
                word &= word - 1;
                Some(w * 64 + b)
            })
        })
    }
}

/// Outcomes `Y_ij` for one office.
#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeMatrix {
    /// Tie formed / not formed.
    Binary(BitMatrix),
    /// Real-valued outcomes (placebo covariates); `NaN` marks missing.
    Real { rows: usize, cols: usize, values: Vec<f64> },
}

impl OutcomeMatrix {
    pub fn rows(&self) -> usize {
        match self {
            Self::Binary(b) => b.rows,
            Self::Real { rows, .. } => *rows,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Self::Binary(b) => b.cols,
            Self::Real { cols, .. } => *cols,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            Self::Binary(b) => f64::from(u8::from(b.get(i, j))),
            Self::Real { cols, values, .. } => values[i * cols + j],
        }
    }

    /// Call `f(j, y)` for every nonzero entry of row `i`, ascending in `j`.
    pub fn for_each_nonzero(&self, i: usize, mut f: impl FnMut(usize, f64)) {
        match self {
            Self::Binary(b) => b.row_ones(i).for_each(|j| f(j, 1.0)),
            Self::Real { cols, values, .. } => {
                for (j, &y) in values[i * cols..(i + 1) * cols].iter().enumerate() {
                    if y != 0.0 {
                        f(j, y);
                    }
                }
            }
        }
    }

    fn row_missing(&self, i: usize) -> bool {
        match self {
            Self::Binary(_) => false,
            Self::Real { cols, values, .. } => values[i * cols..(i + 1) * cols].iter().any(|v| v.is_nan()),
        }
    }

    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        match self {
            Self::Binary(b) => {
                let mut out = BitMatrix::zeros(rows.len(), cols.len());
                for (r, &i) in rows.iter().enumerate() {
                    for (c, &j) in cols.iter().enumerate() {
                        if b.get(i, j) {
                            out.set(r, c, true);
                        }
                    }
                }
                Self::Binary(out)
            }
            Self::Real {
                cols: width, values, ..
            } => Self::Real {
                rows: rows.len(),
                cols: cols.len(),
                values: rows
                    .iter()
                    .flat_map(|&i| cols.iter().map(move |&j| values[i * width + j]))
                    .collect(),
            },
        }
    }
}

/// Raw per-office inputs to [`build_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct OfficeData {
    pub office_id: String,
    pub hires: Vec<NodeIdx>,
    pub candidates: Vec<NodeIdx>,
    pub treatments: TreatmentArray,
    pub outcomes: OutcomeMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SampleMode {
    /// Every retained column must attain every value of the target support.
    Ipw,
    /// Every retained column must have an invertible Gram matrix.
    Late,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DropReason {
    /// Hire row contains an undefined treatment entry.
    UndefinedTreatment,
    /// Hire row has a missing outcome (placebo covariate).
    MissingOutcome,
    /// Fewer than two hires remain in the office.
    SingletonOffice,
    /// Column does not attain every value of the target support.
    ColumnLacksSupport,
    /// Column Gram matrix is numerically singular.
    ColumnRankDeficient,
    /// Office has no retained columns.
    NoRetainedColumns,
    /// Removed by a subset filter.
    FilteredOut,
}

impl DropReason {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UndefinedTreatment => "undefined_treatment",
            Self::MissingOutcome => "missing_outcome",
            Self::SingletonOffice => "singleton_office",
            Self::ColumnLacksSupport => "column_lacks_support",
            Self::ColumnRankDeficient => "column_rank_deficient",
            Self::NoRetainedColumns => "no_retained_columns",
            Self::FilteredOut => "filtered_out",
        }
    }
}

/// One line of the drop log: `units` rows, columns or offices removed for
/// `reason`, accounting for `pairs` candidate pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DropRecord {
    pub office_id: String,
    pub reason: DropReason,
    pub units: usize,
    pub pairs: usize,
}

/// A support-validated office: rows are hires, columns retained candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct OfficeSample {
    pub office_id: String,
    pub hires: Vec<NodeIdx>,
    pub candidates: Vec<NodeIdx>,
    pub treatments: TreatmentArray,
    pub outcomes: OutcomeMatrix,
    pub probabilities: ProbabilityTable,
}

impl OfficeSample {
    pub fn m(&self) -> usize {
        self.hires.len()
    }

    pub fn pairs(&self) -> usize {
        self.hires.len() * self.candidates.len()
    }

    pub fn column_multiset(&self, j: usize) -> Vec<Vec<f64>> {
        column_multiset(&self.treatments, j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub rank_tol: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationSample {
    pub mode: SampleMode,
    pub dim: usize,
    pub labels: Vec<String>,
    pub offices: Vec<OfficeSample>,
    pub drops: Vec<DropRecord>,
    /// Candidate pairs before any drop.
    pub input_pairs: usize,
    /// IPW only: the common support every retained column attains.
    pub target_support: Option<Vec<Vec<f64>>>,
    pub options: SampleOptions,
}

impl EstimationSample {
    pub fn new_hires(&self) -> usize {
        self.offices.iter().map(OfficeSample::m).sum()
    }

    pub fn edges(&self) -> usize {
        self.offices.iter().map(OfficeSample::pairs).sum()
    }

    pub fn dropped_pairs(&self) -> usize {
        self.drops.iter().map(|d| d.pairs).sum()
    }

    /// The group of the retained sample: shuffles of each office's retained
    /// hires.
    pub fn design_plan(&self, master_seed: u64) -> DesignPlan {
        DesignPlan {
            offices: self
                .offices
                .iter()
                .map(|o| OfficeDesign {
                    office_id: o.office_id.clone(),
                    hires: o.hires.clone(),
                    candidates: o.candidates.clone(),
                })
                .collect(),
            master_seed,
        }
    }
}

fn push_drop(drops: &mut Vec<DropRecord>, office: &str, reason: DropReason, units: usize, pairs: usize) {
    if units > 0 || pairs > 0 {
        drops.push(DropRecord {
            office_id: office.to_string(),
            reason,
            units,
            pairs,
        });
    }
}

/// Validate raw office data and keep only the identifying part.
pub fn build_sample(offices: Vec<OfficeData>, mode: SampleMode, options: SampleOptions) -> Result<EstimationSample> {
    let first = offices
        .first()
        .ok_or_else(|| Error::NoIdentifyingVariation("no offices".into()))?;
    let dim = first.treatments.dim();
    let labels = first.treatments.labels().to_vec();
    let continuous = first.treatments.continuous().to_vec();
    for o in &offices {
        if o.treatments.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: o.treatments.dim(),
            });
        }
        if o.treatments.rows() != o.hires.len()
            || o.treatments.cols() != o.candidates.len()
            || o.outcomes.rows() != o.hires.len()
            || o.outcomes.cols() != o.candidates.len()
        {
            return Err(Error::InvalidDesign(format!(
                "office `{}`: treatment/outcome shape does not match hires x candidates",
                o.office_id
            )));
        }
    }
    if mode == SampleMode::Ipw {
        if let Some(k) = continuous.iter().position(|&c| c) {
            return Err(Error::ContinuousInIpw(labels[k].clone()));
        }
    }
    let input_pairs = offices.iter().map(|o| o.hires.len() * o.candidates.len()).sum();
    let mut drops = Vec::new();

    // rows with undefined treatments or missing outcomes
    let mut cleaned = Vec::with_capacity(offices.len());
    for o in offices {
        let cols = o.candidates.len();
        let mut keep = Vec::with_capacity(o.hires.len());
        let (mut undefined, mut missing) = (0, 0);
        for i in 0..o.hires.len() {
            if (0..cols).any(|j| !o.treatments.is_defined(i, j)) {
                undefined += 1;
            } else if o.outcomes.row_missing(i) {
                missing += 1;
            } else {
                keep.push(i);
            }
        }
        push_drop(
            &mut drops,
            &o.office_id,
            DropReason::UndefinedTreatment,
            undefined,
            undefined * cols,
        );
        push_drop(
            &mut drops,
            &o.office_id,
            DropReason::MissingOutcome,
            missing,
            missing * cols,
        );
        if keep.len() == o.hires.len() {
            cleaned.push(o);
        } else {
            let all: Vec<usize> = (0..cols).collect();
            cleaned.push(OfficeData {
                hires: keep.iter().map(|&i| o.hires[i]).collect(),
                treatments: o.treatments.select(&keep, &all),
                outcomes: o.outcomes.select(&keep, &all),
                office_id: o.office_id,
                candidates: o.candidates,
            });
        }
    }

    let target_support = match mode {
        SampleMode::Ipw => {
            let support = union_support(&cleaned);
            let mut gram = vec![0.0; dim * dim];
            for d in &support {
                for r in 0..dim {
                    for c in 0..dim {
                        gram[r * dim + c] += d[r] * d[c];
                    }
                }
            }
            if support.is_empty() || !SymFactor::new(&gram, dim).is_invertible(options.rank_tol) {
                return Err(Error::NoIdentifyingVariation(
                    "treatment support does not identify the regression".into(),
                ));
            }
            Some(support)
        }
        SampleMode::Late => None,
    };

    let mut retained = Vec::new();
    for o in cleaned {
        if let Some(s) = validate_office(o, mode, target_support.as_deref(), options, &mut drops)? {
            retained.push(s);
        }
    }
    if retained.is_empty() {
        return Err(Error::NoIdentifyingVariation("every office was dropped".into()));
    }
    Ok(EstimationSample {
        mode,
        dim,
        labels,
        offices: retained,
        drops,
        input_pairs,
        target_support,
        options,
    })
}

fn union_support(offices: &[OfficeData]) -> Vec<Vec<f64>> {
    let mut all: Vec<Vec<f64>> = Vec::new();
    for o in offices {
        let d = &o.treatments;
        let mut local: Vec<&[f64]> = Vec::new();
        for i in 0..d.rows() {
            for j in 0..d.cols() {
                local.push(d.get(i, j));
            }
        }
        local.sort_by(|a, b| cmp_vectors(a, b));
        local.dedup_by(|a, b| cmp_vectors(a, b) == Ordering::Equal);
        all.extend(local.into_iter().map(<[f64]>::to_vec));
    }
    all.sort_by(|a, b| cmp_vectors(a, b));
    all.dedup_by(|a, b| cmp_vectors(a, b) == Ordering::Equal);
    all
}

fn column_gram(d: &TreatmentArray, j: usize) -> Vec<f64> {
    let dim = d.dim();
    let mut gram = vec![0.0; dim * dim];
    for i in 0..d.rows() {
        let v = d.get(i, j);
        for r in 0..dim {
            for c in r..dim {
                gram[r * dim + c] += v[r] * v[c];
            }
        }
    }
    for r in 0..dim {
        for c in 0..r {
            gram[r * dim + c] = gram[c * dim + r];
        }
    }
    gram
}

/// Apply the singleton and column rules to one office whose rows are all
/// defined. Returns `None` (with drop records) when the office is dropped.
fn validate_office(
    o: OfficeData,
    mode: SampleMode,
    target: Option<&[Vec<f64>]>,
    options: SampleOptions,
    drops: &mut Vec<DropRecord>,
) -> Result<Option<OfficeSample>> {
    let (m, cols) = (o.hires.len(), o.candidates.len());
    if m < 2 {
        push_drop(drops, &o.office_id, DropReason::SingletonOffice, 1, m * cols);
        return Ok(None);
    }
    let probs = assignment_probabilities(&o.treatments)?;
    let mut keep = Vec::with_capacity(cols);
    let mut rejected = 0;
    for j in 0..cols {
        let ok = match mode {
            SampleMode::Ipw => {
                let support = &probs.columns[j];
                target.unwrap_or_default().iter().all(|d| support.contains(d))
            }
            SampleMode::Late => {
                SymFactor::new(&column_gram(&o.treatments, j), o.treatments.dim()).is_invertible(options.rank_tol)
            }
        };
        if ok {
            keep.push(j);
        } else {
            rejected += 1;
        }
    }
    let reason = match mode {
        SampleMode::Ipw => DropReason::ColumnLacksSupport,
        SampleMode::Late => DropReason::ColumnRankDeficient,
    };
    push_drop(drops, &o.office_id, reason, rejected, rejected * m);
    if keep.is_empty() {
        push_drop(drops, &o.office_id, DropReason::NoRetainedColumns, 1, 0);
        return Ok(None);
    }
    let rows: Vec<usize> = (0..m).collect();
    let (treatments, outcomes, probabilities) = if keep.len() == cols {
        (o.treatments, o.outcomes, probs)
    } else {
        let t = o.treatments.select(&rows, &keep);
        let p = ProbabilityTable {
            columns: keep.iter().map(|&j| probs.columns[j].clone()).collect(),
            realized: rows
                .iter()
                .flat_map(|&i| keep.iter().map(move |&j| (i, j)))
                .map(|(i, j)| probs.realized[i * cols + j])
                .collect(),
        };
        (t, o.outcomes.select(&rows, &keep), p)
    };
    Ok(Some(OfficeSample {
        office_id: o.office_id,
        hires: o.hires,
        candidates: keep.iter().map(|&j| o.candidates[j]).collect(),
        treatments,
        outcomes,
        probabilities,
    }))
}

/// Restrict rows and columns by predicates on node indices, re-deriving the
/// group on the kept hires and re-running the support rules.
pub fn restrict_sample(
    sample: &EstimationSample,
    keep_row: impl Fn(NodeIdx) -> bool,
    keep_col: impl Fn(NodeIdx) -> bool,
) -> Result<EstimationSample> {
    let mut drops = sample.drops.clone();
    let mut retained = Vec::new();
    for o in &sample.offices {
        let rows: Vec<usize> = (0..o.m()).filter(|&i| keep_row(o.hires[i])).collect();
        let cols: Vec<usize> = (0..o.candidates.len()).filter(|&j| keep_col(o.candidates[j])).collect();
        let removed = o.pairs() - rows.len() * cols.len();
        push_drop(
            &mut drops,
            &o.office_id,
            DropReason::FilteredOut,
            o.m() - rows.len(),
            removed,
        );
        if rows.is_empty() || cols.is_empty() {
            continue;
        }
        let data = OfficeData {
            office_id: o.office_id.clone(),
            hires: rows.iter().map(|&i| o.hires[i]).collect(),
            candidates: cols.iter().map(|&j| o.candidates[j]).collect(),
            treatments: o.treatments.select(&rows, &cols),
            outcomes: o.outcomes.select(&rows, &cols),
        };
        if let Some(s) = validate_office(
            data,
            sample.mode,
            sample.target_support.as_deref(),
            sample.options,
            &mut drops,
        )? {
            retained.push(s);
        }
    }
    if retained.is_empty() {
        return Err(Error::NoIdentifyingVariation(
            "no office keeps two hires and a valid column after filtering".into(),
        ));
    }
    Ok(EstimationSample {
        mode: sample.mode,
        dim: sample.dim,
        labels: sample.labels.clone(),
        offices: retained,
        drops,
        input_pairs: sample.input_pairs,
        target_support: sample.target_support.clone(),
        options: sample.options,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, NodeRecord};
    use crate::treatment::{treatment_matrix, NetStat, StatKind, StatOptions};

    fn two_hire_office() -> OfficeData {
        let nodes = vec![
            NodeRecord::hire("1", "o"),
            NodeRecord::hire("2", "o"),
            NodeRecord::new("3"),
            NodeRecord::new("4"),
            NodeRecord::new("5"),
        ];
        let (net, _) = build_network(nodes, &[("1", "5"), ("5", "3")], &[("1", "3")]).unwrap();
        let spec = [NetStat::new(StatKind::IndirectFlag)];
        let d = treatment_matrix(&net, &spec, &[0, 1], &[2, 3], StatOptions::default()).unwrap();
        let mut y = BitMatrix::zeros(2, 2);
        y.set(0, 0, true);
        OfficeData {
            office_id: "o".into(),
            hires: vec![0, 1],
            candidates: vec![2, 3],
            treatments: d,
            outcomes: OutcomeMatrix::Binary(y),
        }
    }

    #[test]
    fn singleton_office_permutation_is_identity() {
        let plan = DesignPlan::new(
            vec![OfficeDesign {
                office_id: "a".into(),
                hires: vec![0],
                candidates: vec![1],
            }],
            9,
        )
        .unwrap();
        for k in 0..20 {
            assert_eq!(plan.sample_permutation(k).offices, vec![vec![0]]);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let plan = plan_with_sizes(&[3, 4], 42);
        assert_eq!(plan.sample_permutation(7), plan.sample_permutation(7));
        let distinct: alloc::collections::BTreeSet<_> = (0..50).map(|k| plan.sample_permutation(k).offices).collect();
        assert!(distinct.len() > 1);
    }

    fn plan_with_sizes(sizes: &[usize], seed: u64) -> DesignPlan {
        let mut next = 0;
        let offices = sizes
            .iter()
            .enumerate()
            .map(|(o, &m)| {
                let hires: Vec<usize> = (next..next + m).collect();
                next += m;
                OfficeDesign {
                    office_id: format!("o{o}"),
                    hires,
                    candidates: vec![],
                }
            })
            .collect();
        DesignPlan::new(offices, seed).unwrap()
    }

    #[test]
    fn group_orders() {
        assert_eq!(plan_with_sizes(&[3], 0).enumerate_group(100).unwrap().count(), 6);
        assert_eq!(plan_with_sizes(&[2, 2], 0).enumerate_group(100).unwrap().count(), 4);
        assert_eq!(plan_with_sizes(&[4, 4], 0).enumerate_group(1000).unwrap().count(), 576);
        let all: alloc::collections::BTreeSet<_> = plan_with_sizes(&[2, 3], 0)
            .enumerate_group(100)
            .unwrap()
            .map(|p| p.offices)
            .collect();
        assert_eq!(all.len(), 12);
        assert!(matches!(
            plan_with_sizes(&[10], 0).enumerate_group(1000),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn enumeration_starts_at_identity() {
        let first = plan_with_sizes(&[3, 2], 0)
            .enumerate_group(100)
            .unwrap()
            .next()
            .unwrap();
        assert_eq!(first, StratifiedPermutation::identity(&[3, 2]));
    }

    #[test]
    fn cross_office_overlap_rejected() {
        let err = DesignPlan::new(
            vec![
                OfficeDesign {
                    office_id: "a".into(),
                    hires: vec![0, 1],
                    candidates: vec![2],
                },
                OfficeDesign {
                    office_id: "b".into(),
                    hires: vec![2, 3],
                    candidates: vec![4],
                },
            ],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidDesign(_)));
    }

    #[test]
    fn probabilities_by_frequency() {
        let o = two_hire_office();
        let p = assignment_probabilities(&o.treatments).unwrap();
        // column 3: values {1, 0}
        assert_eq!(p.columns[0].probability(&[1.0, 1.0]), 0.5);
        assert_eq!(p.columns[0].probability(&[1.0, 0.0]), 0.5);
        assert_eq!(p.realized[0], 0.5);
        assert_eq!(p.realized[2], 0.5);
        // column 4: constant
        assert_eq!(p.columns[1].probability(&[1.0, 0.0]), 1.0);
        assert_eq!(p.realized[1], 1.0);
        assert_eq!(p.realized[3], 1.0);

        let d = TreatmentArray::from_parts(
            4,
            1,
            vec!["intercept".into(), "x".into()],
            vec![false, false],
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let p = assignment_probabilities(&d).unwrap();
        assert_eq!(p.columns[0].probability(&[1.0, 1.0]), 0.5);
    }

    #[test]
    fn empty_column_is_an_error() {
        let d = TreatmentArray::from_parts(0, 1, vec!["intercept".into()], vec![false], vec![]).unwrap();
        assert_eq!(assignment_probabilities(&d).unwrap_err(), Error::EmptyColumn(0));
    }

    #[test]
    fn ipw_support_rule_keeps_varying_column() {
        let s = build_sample(vec![two_hire_office()], SampleMode::Ipw, SampleOptions::default()).unwrap();
        assert_eq!(s.offices.len(), 1);
        assert_eq!(s.offices[0].candidates, vec![2]);
        assert_eq!(s.edges(), 2);
        assert_eq!(s.input_pairs, s.edges() + s.dropped_pairs());
        assert_eq!(s.drops[0].reason, DropReason::ColumnLacksSupport);
    }

    #[test]
    fn constant_treatment_has_no_variation() {
        let mut o = two_hire_office();
        let data: Vec<f64> = o.treatments.data().chunks(2).flat_map(|_| [1.0, 0.0]).collect();
        o.treatments =
            TreatmentArray::from_parts(2, 2, o.treatments.labels().to_vec(), vec![false, false], data).unwrap();
        for mode in [SampleMode::Ipw, SampleMode::Late] {
            let err = build_sample(vec![o.clone()], mode, SampleOptions::default()).unwrap_err();
            assert!(matches!(err, Error::NoIdentifyingVariation(_)));
        }
    }

    #[test]
    fn late_rank_rule() {
        // D_ij = (1, x_i), x in {0, 2}
        let d = TreatmentArray::from_parts(
            2,
            1,
            vec!["intercept".into(), "x".into()],
            vec![false, true],
            vec![1.0, 0.0, 1.0, 2.0],
        )
        .unwrap();
        let o = OfficeData {
            office_id: "o".into(),
            hires: vec![0, 1],
            candidates: vec![2],
            treatments: d,
            outcomes: OutcomeMatrix::Binary(BitMatrix::zeros(2, 1)),
        };
        let s = build_sample(vec![o.clone()], SampleMode::Late, SampleOptions::default()).unwrap();
        assert_eq!(s.edges(), 2);
        let err = build_sample(vec![o], SampleMode::Ipw, SampleOptions::default()).unwrap_err();
        assert_eq!(err, Error::ContinuousInIpw("x".into()));
    }

    #[test]
    fn restriction_filters_and_revalidates() {
        let s = build_sample(vec![two_hire_office()], SampleMode::Ipw, SampleOptions::default()).unwrap();
        let same = restrict_sample(&s, |_| true, |_| true).unwrap();
        assert_eq!(same.offices, s.offices);
        let err = restrict_sample(&s, |i| i == 0, |_| true).unwrap_err();
        assert!(matches!(err, Error::NoIdentifyingVariation(_)));
    }

    #[test]
    fn bit_matrix_row_ones() {
        let mut b = BitMatrix::zeros(2, 130);
        for j in [0, 63, 64, 129] {
            b.set(1, j, true);
        }
        assert_eq!(b.row_ones(1).collect::<Vec<_>>(), vec![0, 63, 64, 129]);
        assert_eq!(b.row_ones(0).count(), 0);
        b.set(1, 64, false);
        assert!(!b.get(1, 64));
    }
}
