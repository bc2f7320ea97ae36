//! Per-office IPW and within-regression fits, the `B`/`G` lookup tables that
//! make re-estimation under a permutation a diagonal sum, and aggregation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::design::{EstimationSample, OfficeSample, OutcomeMatrix, SampleMode};
use crate::error::{Error, Result};
use crate::linalg::SymFactor;
use crate::math::CompensatedSum;

/// Default budget for table entries (`sum_o m_o^2 * dim`).
pub const DEFAULT_TABLE_BUDGET: u64 = 800_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Above this many table entries, offices keep their regression weights
    /// and recompute permuted estimates directly.
    pub table_budget: u64,
    pub rank_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            table_budget: DEFAULT_TABLE_BUDGET,
            rank_tol: crate::design::DEFAULT_RANK_TOL,
        }
    }
}

/// Square `m x m` table of coefficient vectors; entry `(a, b)` is the
/// contribution of treatment row `a` paired with outcome row `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefTable {
    m: usize,
    dim: usize,
    data: Vec<f64>,
}

impl CoefTable {
    pub fn zeros(m: usize, dim: usize) -> Self {
        Self {
            m,
            dim,
            data: vec![0.0; m * m * dim],
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> &[f64] {
        let at = (a * self.m + b) * self.dim;
        &self.data[at..at + self.dim]
    }

    #[inline]
    pub fn get_mut(&mut self, a: usize, b: usize) -> &mut [f64] {
        let at = (a * self.m + b) * self.dim;
        &mut self.data[at..at + self.dim]
    }

    /// `sum_i table[perm[i]][i]`, accumulated in row order.
    pub fn diagonal_sum_into(&self, perm: &[usize], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &p) in perm.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.get(p, i)) {
                *o += v;
            }
        }
    }

    /// Coordinate `k` of every entry as a row-major `m x m` matrix.
    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(self.dim).copied().collect()
    }
}

/// Regression weights `V_aj` (`C Z_aj` for IPW, `C_j D_aj / |J|` for the
/// within regression), stored column-major: column `j` holds `m x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairWeights {
    m: usize,
    cols: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PairWeights {
    #[inline]
    fn column(&self, j: usize) -> &[f64] {
        let w = self.m * self.dim;
        &self.data[j * w..(j + 1) * w]
    }

    #[inline]
    pub(crate) fn get(&self, a: usize, j: usize) -> &[f64] {
        let at = (j * self.m + a) * self.dim;
        &self.data[at..at + self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitStorage {
    Table(CoefTable),
    /// Fallback when tables exceed the memory budget.
    Weights(PairWeights),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfficeFit {
    pub office_id: String,
    pub kind: SampleMode,
    pub m: usize,
    pub cols: usize,
    /// `m_o / m`.
    pub weight: f64,
    pub estimate: Vec<f64>,
    pub storage: FitStorage,
}

impl OfficeFit {
    pub fn dim(&self) -> usize {
        self.estimate.len()
    }

    pub fn table(&self) -> Option<&CoefTable> {
        match &self.storage {
            FitStorage::Table(t) => Some(t),
            FitStorage::Weights(_) => None,
        }
    }

    /// Estimate on data whose treatment rows are permuted so that row `i`
    /// carries the treatments of row `perm[i]`, outcomes held fixed.
    pub fn permuted_estimate(&self, office: &OfficeSample, perm: &[usize]) -> Result<Vec<f64>> {
        check_local_perm(perm, self.m)?;
        let mut out = vec![0.0; self.dim()];
        self.permuted_into(office, perm, &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`permuted_estimate`](Self::permuted_estimate).
    pub fn permuted_into(&self, office: &OfficeSample, perm: &[usize], out: &mut [f64]) {
        match &self.storage {
            FitStorage::Table(t) => t.diagonal_sum_into(perm, out),
            FitStorage::Weights(w) => direct_sum_into(w, &office.outcomes, perm, out),
        }
    }
}

pub(crate) fn check_local_perm(perm: &[usize], m: usize) -> Result<()> {
    if perm.len() != m {
        return Err(Error::NotBijection(alloc::format!(
            "expected {m} positions, got {}",
            perm.len()
        )));
    }
    let mut seen = vec![false; m];
    for &p in perm {
        if p >= m || core::mem::replace(&mut seen[p], true) {
            return Err(Error::NotBijection(alloc::format!(
                "position {p} repeated or out of range"
            )));
        }
    }
    Ok(())
}

fn direct_sum_into(w: &PairWeights, y: &OutcomeMatrix, perm: &[usize], out: &mut [f64]) {
    let mut acc = vec![CompensatedSum::new(); w.dim];
    for (i, &p) in perm.iter().enumerate() {
        y.for_each_nonzero(i, |j, v| {
            for (a, x) in acc.iter_mut().zip(w.get(p, j)) {
                a.add(x * v);
            }
        });
    }
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = a.value();
    }
}

fn ipw_weights(office: &OfficeSample, rank_tol: f64) -> Result<PairWeights> {
    let d = &office.treatments;
    let (m, cols, dim) = (d.rows(), d.cols(), d.dim());
    let mut gram = vec![CompensatedSum::new(); dim * dim];
    for i in 0..m {
        for j in 0..cols {
            let v = d.get(i, j);
            let inv_p = 1.0 / office.probabilities.realized[i * cols + j];
            for r in 0..dim {
                for c in 0..dim {
                    gram[r * dim + c].add(v[r] * v[c] * inv_p);
                }
            }
        }
    }
    let gram: Vec<f64> = gram.iter().map(CompensatedSum::value).collect();
    let factor = SymFactor::new(&gram, dim);
    if !factor.is_invertible(rank_tol) {
        return Err(Error::SingularGram(office.office_id.clone()));
    }
    let mut data = vec![0.0; m * cols * dim];
    let mut z = vec![0.0; dim];
    for j in 0..cols {
        for a in 0..m {
            let inv_p = 1.0 / office.probabilities.realized[a * cols + j];
            for (zk, dk) in z.iter_mut().zip(d.get(a, j)) {
                *zk = dk * inv_p;
            }
            let at = (j * m + a) * dim;
            factor.solve_into(&z, &mut data[at..at + dim]);
        }
    }
    Ok(PairWeights { m, cols, dim, data })
}

fn within_weights(office: &OfficeSample, rank_tol: f64) -> Result<PairWeights> {
    let d = &office.treatments;
    let (m, cols, dim) = (d.rows(), d.cols(), d.dim());
    let mut data = vec![0.0; m * cols * dim];
    let mut gram = vec![0.0; dim * dim];
    let scale = 1.0 / cols as f64;
    for j in 0..cols {
        gram.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..m {
            let v = d.get(i, j);
            for r in 0..dim {
                for c in 0..dim {
                    gram[r * dim + c] += v[r] * v[c];
                }
            }
        }
        let factor = SymFactor::new(&gram, dim);
        if !factor.is_invertible(rank_tol) {
            return Err(Error::SingularGram(office.office_id.clone()));
        }
        for a in 0..m {
            let at = (j * m + a) * dim;
            let slot = &mut data[at..at + dim];
            factor.solve_into(d.get(a, j), slot);
            slot.iter_mut().for_each(|x| *x *= scale);
        }
    }
    Ok(PairWeights { m, cols, dim, data })
}

fn build_table(w: &PairWeights, y: &OutcomeMatrix) -> CoefTable {
    let (m, dim) = (w.m, w.dim);
    let width = m * dim;
    let mut table = CoefTable::zeros(m, dim);
    let mut acc = vec![CompensatedSum::new(); width];
    for b in 0..m {
        acc.iter_mut().for_each(|a| *a = CompensatedSum::new());
        y.for_each_nonzero(b, |j, v| {
            let col = w.column(j);
            if v == 1.0 {
                for (a, x) in acc.iter_mut().zip(col) {
                    a.add(*x);
                }
            } else {
                for (a, x) in acc.iter_mut().zip(col) {
                    a.add(x * v);
                }
            }
        });
        for a in 0..m {
            let cell = table.get_mut(a, b);
            for k in 0..dim {
                cell[k] = acc[a * dim + k].value();
            }
        }
    }
    table
}

pub(crate) fn pair_weights(office: &OfficeSample, kind: SampleMode, rank_tol: f64) -> Result<PairWeights> {
    match kind {
        SampleMode::Ipw => ipw_weights(office, rank_tol),
        SampleMode::Late => within_weights(office, rank_tol),
    }
}

fn fit_with(
    office: &OfficeSample,
    kind: SampleMode,
    weight: f64,
    keep_table: bool,
    rank_tol: f64,
) -> Result<OfficeFit> {
    let w = pair_weights(office, kind, rank_tol)?;
    let m = office.m();
    let dim = w.dim;
    let identity: Vec<usize> = (0..m).collect();
    let mut estimate = vec![0.0; dim];
    let storage = if keep_table {
        let t = build_table(&w, &office.outcomes);
        t.diagonal_sum_into(&identity, &mut estimate);
        FitStorage::Table(t)
    } else {
        direct_sum_into(&w, &office.outcomes, &identity, &mut estimate);
        FitStorage::Weights(w)
    };
    Ok(OfficeFit {
        office_id: office.office_id.clone(),
        kind,
        m,
        cols: office.candidates.len(),
        weight,
        estimate,
        storage,
    })
}

/// Inverse-probability-weighted regression for one office, with its `B`
/// table.
pub fn ipw_fit(office: &OfficeSample, weight: f64) -> Result<OfficeFit> {
    fit_with(office, SampleMode::Ipw, weight, true, FitOptions::default().rank_tol)
}

/// Column-wise least squares averaged over columns, with its `G` table.
pub fn within_fit(office: &OfficeSample, weight: f64) -> Result<OfficeFit> {
    fit_with(office, SampleMode::Late, weight, true, FitOptions::default().rank_tol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateFit {
    pub kind: SampleMode,
    pub labels: Vec<String>,
    pub estimate: Vec<f64>,
    pub offices: Vec<OfficeFit>,
    /// Total retained new hires.
    pub m: usize,
}

impl AggregateFit {
    pub fn n_offices(&self) -> usize {
        self.offices.len()
    }

    pub fn dim(&self) -> usize {
        self.estimate.len()
    }

    pub fn has_tables(&self) -> bool {
        self.offices.iter().all(|o| o.table().is_some())
    }

    /// Aggregate estimate under one local permutation per office.
    pub fn permuted_estimate(&self, sample: &EstimationSample, perms: &[Vec<usize>]) -> Result<Vec<f64>> {
        if perms.len() != self.offices.len() {
            return Err(Error::NotBijection("office count mismatch".into()));
        }
        for (fit, p) in self.offices.iter().zip(perms) {
            check_local_perm(p, fit.m)?;
        }
        let mut out = vec![0.0; self.dim()];
        let mut scratch = vec![0.0; self.dim()];
        self.permuted_into(sample, perms, &mut out, &mut scratch);
        Ok(out)
    }

    pub(crate) fn permuted_into(
        &self,
        sample: &EstimationSample,
        perms: &[Vec<usize>],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for ((fit, office), p) in self.offices.iter().zip(&sample.offices).zip(perms) {
            fit.permuted_into(office, p, scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += fit.weight * s;
            }
        }
    }
}

/// `sum_o w_o * est_o` over office fits.
pub fn aggregate(office_fits: Vec<OfficeFit>, labels: Vec<String>) -> Result<AggregateFit> {
    let first = office_fits
        .first()
        .ok_or_else(|| Error::InvalidArgument("no office fits to aggregate".into()))?;
    let dim = first.dim();
    let kind = first.kind;
    let mut estimate = vec![0.0; dim];
    for f in &office_fits {
        if f.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: f.dim(),
            });
        }
        for (e, v) in estimate.iter_mut().zip(&f.estimate) {
            *e += f.weight * v;
        }
    }
    let m = office_fits.iter().map(|f| f.m).sum();
    Ok(AggregateFit {
        kind,
        labels,
        estimate,
        offices: office_fits,
        m,
    })
}

/// Fit every office of the sample with the estimator matching its mode.
pub fn fit_sample(sample: &EstimationSample, options: FitOptions) -> Result<AggregateFit> {
    let m: usize = sample.new_hires();
    let entries: u128 = sample
        .offices
        .iter()
        .map(|o| (o.m() * o.m()) as u128 * sample.dim as u128)
        .sum();
    let keep_table = entries <= u128::from(options.table_budget);
    if !keep_table {
        log::warn!(
            "table size {entries} exceeds budget {}; permuted estimates will be recomputed directly",
            options.table_budget
        );
    }
    let fit_one = |o: &OfficeSample| fit_with(o, sample.mode, o.m() as f64 / m as f64, keep_table, options.rank_tol);
    #[cfg(feature = "parallel")]
    let fits: Vec<Result<OfficeFit>> = {
        use rayon::prelude::*;
        sample.offices.par_iter().map(fit_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let fits: Vec<Result<OfficeFit>> = sample.offices.iter().map(fit_one).collect();
    aggregate(fits.into_iter().collect::<Result<_>>()?, sample.labels.clone())
}

/// Unweighted pooled least squares of `Y` on `D` over every retained pair.
pub fn naive_pooled_ols(sample: &EstimationSample) -> Result<Vec<f64>> {
    let dim = sample.dim;
    let mut gram = vec![CompensatedSum::new(); dim * dim];
    let mut rhs = vec![CompensatedSum::new(); dim];
    for o in &sample.offices {
        let d = &o.treatments;
        for i in 0..d.rows() {
            for j in 0..d.cols() {
                let v = d.get(i, j);
                let y = o.outcomes.get(i, j);
                for r in 0..dim {
                    rhs[r].add(v[r] * y);
                    for c in 0..dim {
                        gram[r * dim + c].add(v[r] * v[c]);
                    }
                }
            }
        }
    }
    let gram: Vec<f64> = gram.iter().map(CompensatedSum::value).collect();
    let rhs: Vec<f64> = rhs.iter().map(CompensatedSum::value).collect();
    let factor = SymFactor::new(&gram, dim);
    if !factor.is_invertible(sample.options.rank_tol) {
        return Err(Error::SingularGram("pooled".into()));
    }
    Ok(factor.solve(&rhs))
}
