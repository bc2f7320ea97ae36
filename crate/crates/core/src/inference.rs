//! Permutation p-values, between-office conservative variance, normal
//! confidence intervals and Berry-Esseen bound arithmetic.

use alloc::vec;
use alloc::vec::Vec;

use crate::design::{group_order, sample_stratified, EstimationSample, GroupIter, StratifiedPermutation};
use crate::error::{Error, Result};
use crate::estimation::{AggregateFit, CoefTable};
use crate::math::{compensated_sum, normal_quantile, CompensatedSum};

/// Relative tolerance under which a permuted statistic counts as tied with
/// the observed one.
pub const TIE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Draws {
    /// Every element of the group, identity first.
    Enumerate { cap: u64 },
    /// `draws` uniform samples, draw `k` a pure function of `(seed, k)`.
    MonteCarlo { draws: u64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PermutationMode {
    Enumerated,
    MonteCarlo,
}

/// Permuted aggregate statistics for every coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationDistribution {
    pub mode: PermutationMode,
    pub observed: Vec<f64>,
    /// `n_draws x dim`, row-major, in draw order.
    pub stats: Vec<f64>,
    pub dim: usize,
}

impl PermutationDistribution {
    pub fn n_draws(&self) -> usize {
        self.stats.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.stats.iter().skip(k).step_by(self.dim).copied().collect()
    }

    /// Size of the reference set in the two-sided formula.
    pub fn reference_size(&self) -> f64 {
        match self.mode {
            PermutationMode::Enumerated => self.n_draws() as f64,
            PermutationMode::MonteCarlo => self.n_draws() as f64 + 1.0,
        }
    }

    pub fn result(&self, coordinate: usize) -> Result<PermutationResult> {
        if coordinate >= self.dim {
            return Err(Error::InvalidArgument(alloc::format!(
                "coordinate {coordinate} out of range for {} coefficients",
                self.dim
            )));
        }
        let draws = self.coordinate(coordinate);
        let observed = self.observed[coordinate];
        let p_one_sided = one_sided_p(observed, &draws, self.mode);
        let p_two_sided = two_sided_p_with_ties(observed, &draws, self.mode);
        Ok(PermutationResult {
            coordinate,
            observed,
            n_draws: draws.len(),
            draws,
            p_one_sided,
            p_two_sided,
            mode: self.mode,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationResult {
    pub coordinate: usize,
    pub observed: f64,
    pub draws: Vec<f64>,
    pub p_one_sided: f64,
    pub p_two_sided: f64,
    pub n_draws: usize,
    pub mode: PermutationMode,
}

fn tie_slack(observed: f64, draws: &[f64]) -> f64 {
    let scale = draws.iter().fold(libm::fabs(observed), |m, v| m.max(libm::fabs(*v)));
    TIE_TOLERANCE * scale
}

/// Right-tail p-value. Enumerated: `#{stat >= obs} / n`; Monte Carlo:
/// `(1 + #{stat >= obs}) / (1 + R)`.
pub fn one_sided_p(observed: f64, draws: &[f64], mode: PermutationMode) -> f64 {
    let slack = tie_slack(observed, draws);
    let hits = draws.iter().filter(|&&s| s >= observed - slack).count() as f64;
    match mode {
        PermutationMode::Enumerated => hits / draws.len() as f64,
        PermutationMode::MonteCarlo => (1.0 + hits) / (1.0 + draws.len() as f64),
    }
}

/// `2 min(p, 1 - p + 1/K)`, capped at 1, where `K` is the group order
/// (enumeration) or `R + 1` (Monte Carlo).
pub fn two_sided_p(p: f64, reference_size: f64) -> f64 {
    (2.0 * p.min(1.0 - p + 1.0 / reference_size)).min(1.0)
}

/// Left-tail p-value, the mirror of [`one_sided_p`].
pub fn lower_p(observed: f64, draws: &[f64], mode: PermutationMode) -> f64 {
    let slack = tie_slack(observed, draws);
    let hits = draws.iter().filter(|&&s| s <= observed + slack).count() as f64;
    match mode {
        PermutationMode::Enumerated => hits / draws.len() as f64,
        PermutationMode::MonteCarlo => (1.0 + hits) / (1.0 + draws.len() as f64),
    }
}

/// `2 min(p_upper, p_lower)`, capped at 1. Without ties at the observed
/// value this equals [`two_sided_p`]; with ties the lower tail counts them
/// instead of assuming `1 - p + 1/K`.
pub fn two_sided_p_with_ties(observed: f64, draws: &[f64], mode: PermutationMode) -> f64 {
    let upper = one_sided_p(observed, draws, mode);
    (2.0 * upper.min(lower_p(observed, draws, mode))).min(1.0)
}

/// Aggregate statistic for every permutation in `draws`.
pub fn permutation_distribution(
    fit: &AggregateFit,
    sample: &EstimationSample,
    draws: Draws,
) -> Result<PermutationDistribution> {
    if fit.offices.len() != sample.offices.len() {
        return Err(Error::InvalidArgument("fit does not belong to this sample".into()));
    }
    let sizes: Vec<usize> = fit.offices.iter().map(|o| o.m).collect();
    let dim = fit.dim();
    let (mode, stats) = match draws {
        Draws::Enumerate { cap } => {
            let group = GroupIter::new(&sizes, cap)?;
            let mut stats = Vec::with_capacity(group.order() as usize * dim);
            let mut out = vec![0.0; dim];
            let mut scratch = vec![0.0; dim];
            for p in group {
                fit.permuted_into(sample, &p.offices, &mut out, &mut scratch);
                stats.extend_from_slice(&out);
            }
            (PermutationMode::Enumerated, stats)
        }
        Draws::MonteCarlo { draws, seed } => {
            if draws == 0 {
                return Err(Error::InvalidArgument("need at least one permutation draw".into()));
            }
            let mut stats = vec![0.0; draws as usize * dim];
            let eval = |k: usize, slot: &mut [f64], scratch: &mut Vec<f64>| {
                let p = sample_stratified(&sizes, seed, k as u64);
                fit.permuted_into(sample, &p.offices, slot, scratch);
            };
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                stats
                    .par_chunks_mut(dim.max(1))
                    .enumerate()
                    .for_each_init(|| vec![0.0; dim], |scratch, (k, slot)| eval(k, slot, scratch));
            }
            #[cfg(not(feature = "parallel"))]
            {
                let mut scratch = vec![0.0; dim];
                for (k, slot) in stats.chunks_mut(dim.max(1)).enumerate() {
                    eval(k, slot, &mut scratch);
                }
            }
            (PermutationMode::MonteCarlo, stats)
        }
    };
    Ok(PermutationDistribution {
        mode,
        observed: fit.estimate.clone(),
        stats,
        dim,
    })
}

/// Permutation test on one coordinate.
pub fn permutation_test(
    fit: &AggregateFit,
    sample: &EstimationSample,
    draws: Draws,
    coordinate: usize,
) -> Result<PermutationResult> {
    permutation_distribution(fit, sample, draws)?.result(coordinate)
}

/// Between-office variance `N/(N-1) sum_o (w_o est_o - est/N)^2`, per
/// coordinate.
pub fn conservative_variance(fit: &AggregateFit) -> Result<Vec<f64>> {
    let n = fit.n_offices();
    if n < 2 {
        return Err(Error::TooFewOffices);
    }
    let nf = n as f64;
    Ok((0..fit.dim())
        .map(|k| {
            let centre = fit.estimate[k] / nf;
            let ss = compensated_sum(fit.offices.iter().map(|o| {
                let dev = o.weight * o.estimate[k] - centre;
                dev * dev
            }));
            nf / (nf - 1.0) * ss
        })
        .collect())
}

/// Symmetric normal interval `estimate -/+ z sqrt(v)`.
pub fn confidence_interval(estimate: f64, variance: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidLevel(level));
    }
    if !(variance >= 0.0) {
        return Err(Error::InvalidArgument("variance must be non-negative".into()));
    }
    let half = normal_quantile((1.0 + level) / 2.0) * libm::sqrt(variance);
    Ok((estimate - half, estimate + half))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMethod {
    /// Exact variance over the group (per office, combined by independence).
    Enumerated { cap: u64 },
    /// Closed-form variance of a linear permutation statistic.
    Hoeffding,
    /// Sample variance over Monte Carlo draws.
    MonteCarlo { draws: u64, seed: u64 },
}

/// Variance of the permuted aggregate statistic, per coordinate.
pub fn permutation_variance(fit: &AggregateFit, sample: &EstimationSample, method: VarianceMethod) -> Result<Vec<f64>> {
    let dim = fit.dim();
    match method {
        VarianceMethod::Hoeffding => {
            let mut total = vec![0.0; dim];
            for o in &fit.offices {
                let table = o
                    .table()
                    .ok_or_else(|| Error::InvalidArgument("closed-form variance needs coefficient tables".into()))?;
                if o.m < 2 {
                    log::warn!("office `{}` has a single hire and contributes no variance", o.office_id);
                    continue;
                }
                for (k, t) in total.iter_mut().enumerate() {
                    *t += o.weight * o.weight * linear_statistic_variance(table, k);
                }
            }
            Ok(total)
        }
        VarianceMethod::Enumerated { cap } => {
            let mut total = vec![0.0; dim];
            let mut out = vec![0.0; dim];
            for (fit_o, office) in fit.offices.iter().zip(&sample.offices) {
                let group = GroupIter::new(&[fit_o.m], cap)?;
                let mut values: Vec<Vec<f64>> = vec![Vec::new(); dim];
                for p in group {
                    fit_o.permuted_into(office, &p.offices[0], &mut out);
                    for (v, x) in values.iter_mut().zip(&out) {
                        v.push(*x);
                    }
                }
                for (t, v) in total.iter_mut().zip(&values) {
                    *t += fit_o.weight * fit_o.weight * crate::math::mean_and_variance(v).1;
                }
            }
            Ok(total)
        }
        VarianceMethod::MonteCarlo { draws, seed } => {
            if draws < 2 {
                return Err(Error::InvalidArgument("need at least two draws for a variance".into()));
            }
            let dist = permutation_distribution(fit, sample, Draws::MonteCarlo { draws, seed })?;
            Ok((0..dim)
                .map(|k| {
                    let v = dist.coordinate(k);
                    let (_, pop) = crate::math::mean_and_variance(&v);
                    pop * v.len() as f64 / (v.len() as f64 - 1.0)
                })
                .collect())
        }
    }
}

/// Variance of `sum_i a[pi(i)][i]` under a uniform permutation:
/// `1/(m-1) sum (a - rowmean - colmean + grandmean)^2`.
pub fn linear_statistic_variance(table: &CoefTable, k: usize) -> f64 {
    let m = table.m();
    if m < 2 {
        return 0.0;
    }
    let a = table.coordinate(k);
    let mf = m as f64;
    let row: Vec<f64> = (0..m)
        .map(|r| compensated_sum((0..m).map(|c| a[r * m + c])) / mf)
        .collect();
    let col: Vec<f64> = (0..m)
        .map(|c| compensated_sum((0..m).map(|r| a[r * m + c])) / mf)
        .collect();
    let grand = compensated_sum(row.iter().copied()) / mf;
    let mut acc = CompensatedSum::new();
    for r in 0..m {
        for c in 0..m {
            let e = a[r * m + c] - row[r] - col[c] + grand;
            acc.add(e * e);
        }
    }
    acc.value() / (mf - 1.0)
}

/// `(C / sigma^3) sum_o (m_o^2 / m^3) sum_{i,i'} |table_o[i][i']|^3` on
/// coordinate `k`, with `m = sum_o m_o`.
pub fn berry_esseen_bound(tables: &[&CoefTable], k: usize, sigma: f64, constant: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::DegenerateDistribution);
    }
    let m: f64 = tables.iter().map(|t| t.m() as f64).sum();
    let mut acc = CompensatedSum::new();
    for t in tables {
        let mo = t.m() as f64;
        let cubes = compensated_sum(t.coordinate(k).iter().map(|v| {
            let a = libm::fabs(*v);
            a * a * a
        }));
        acc.add(mo * mo / (m * m * m) * cubes);
    }
    Ok(constant / (sigma * sigma * sigma) * acc.value())
}

/// Per-coordinate summary of the uncertainty of an aggregate fit.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    /// Conservative between-office variance, `None` with a single office.
    pub v_hat: Option<Vec<f64>>,
    /// `w_o est_o - est/N` per office and coordinate.
    pub office_deviations: Vec<Vec<f64>>,
    pub n_offices: usize,
    pub permutation_variance: Vec<f64>,
    /// Bound on the permutation statistic's distance to normality, in units
    /// of the constant.
    pub berry_esseen: Vec<Option<f64>>,
    pub constant: f64,
}

pub fn variance_report(
    fit: &AggregateFit,
    sample: &EstimationSample,
    method: VarianceMethod,
    constant: f64,
) -> Result<VarianceReport> {
    let n = fit.n_offices() as f64;
    let office_deviations = fit
        .offices
        .iter()
        .map(|o| {
            o.estimate
                .iter()
                .zip(&fit.estimate)
                .map(|(e, tot)| o.weight * e - tot / n)
                .collect()
        })
        .collect();
    let v_hat = match conservative_variance(fit) {
        Ok(v) => Some(v),
        Err(Error::TooFewOffices) => None,
        Err(e) => return Err(e),
    };
    let pv = permutation_variance(fit, sample, method)?;
    let tables: Option<Vec<&CoefTable>> = fit.offices.iter().map(|o| o.table()).collect();
    let berry_esseen = pv
        .iter()
        .enumerate()
        .map(|(k, v)| {
            tables
                .as_ref()
                .and_then(|t| berry_esseen_bound(t, k, libm::sqrt(*v), constant).ok())
        })
        .collect();
    Ok(VarianceReport {
        v_hat,
        office_deviations,
        n_offices: fit.n_offices(),
        permutation_variance: pv,
        berry_esseen,
        constant,
    })
}

/// Whether the full group of `sizes` fits under `cap`.
pub fn enumerable(sizes: &[usize], cap: u64) -> bool {
    group_order(sizes).is_some_and(|k| k <= u128::from(cap))
}

/// Convenience: all local permutations of the group (identity first).
pub fn enumerate_all(sizes: &[usize], cap: u64) -> Result<Vec<StratifiedPermutation>> {
    Ok(GroupIter::new(sizes, cap)?.collect())
}
