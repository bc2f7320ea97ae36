//! From a temporal network to a finished estimate report: threshold
//! resolution, outcome matrices, subset filters, fitting and inference.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::design::{
    build_sample, restrict_sample, BitMatrix, DesignPlan, DropRecord, EstimationSample, OfficeData, OutcomeMatrix,
    SampleMode, SampleOptions, DEFAULT_ENUMERATION_CAP, DEFAULT_RANK_TOL,
};
use crate::error::{Error, Result};
use crate::estimation::{fit_sample, AggregateFit, FitOptions, DEFAULT_TABLE_BUDGET};
use crate::inference::{
    confidence_interval, conservative_variance, permutation_distribution, Draws, PermutationDistribution,
    PermutationMode,
};
use crate::network::{NodeIdx, NodeRecord, SnapshotId, TemporalNetwork};
use crate::treatment::{median, treatment_matrix, NetStat, StatOptions};

/// What plays the role of `Y_ij`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutcomeSpec {
    /// Tie formed in the second snapshot.
    Ties,
    /// A new-hire covariate, constant across candidate ties (placebo).
    Covariate(String),
}

impl OutcomeSpec {
    pub fn name(&self) -> &str {
        match self {
            Self::Ties => "ties",
            Self::Covariate(c) => c,
        }
    }
}

/// Replace every unresolved (`NaN`) binarization threshold by the median of
/// the raw statistic over all hire-candidate pairs of the plan, before any
/// drop. Returns the resolved thresholds in spec order.
pub fn resolve_thresholds(
    net: &TemporalNetwork,
    plan: &DesignPlan,
    spec: &mut [NetStat],
    opts: StatOptions,
) -> Result<Vec<Option<f64>>> {
    for s in spec.iter_mut() {
        if !s.binarize_threshold.is_some_and(f64::is_nan) {
            continue;
        }
        let raw = [NetStat::new(s.kind)];
        let mut values = Vec::new();
        for o in &plan.offices {
            let d = treatment_matrix(net, &raw, &o.hires, &o.candidates, opts)?;
            values.extend(d.data().chunks(2).map(|c| c[1]).filter(|v| !v.is_nan()));
        }
        let t = median(&mut values).ok_or_else(|| {
            Error::NoIdentifyingVariation(format!("no defined values of `{}` to take a median of", s.label()))
        })?;
        s.binarize_threshold = Some(t);
    }
    Ok(spec.iter().map(|s| s.binarize_threshold).collect())
}

fn tie_outcomes(net: &TemporalNetwork, hires: &[NodeIdx], candidates: &[NodeIdx]) -> OutcomeMatrix {
    let mut col_of = alloc::collections::BTreeMap::new();
    let dense = candidates.len() * 4 >= net.n();
    let mut lookup = if dense { vec![usize::MAX; net.n()] } else { Vec::new() };
    for (c, &j) in candidates.iter().enumerate() {
        if dense {
            lookup[j] = c;
        } else {
            col_of.insert(j, c);
        }
    }
    let second = net.snapshot(SnapshotId::Second);
    let mut y = BitMatrix::zeros(hires.len(), candidates.len());
    for (r, &i) in hires.iter().enumerate() {
        for &k in second.neighbors(i) {
            let c = if dense {
                Some(lookup[k as usize]).filter(|&c| c != usize::MAX)
            } else {
                col_of.get(&(k as usize)).copied()
            };
            if let Some(c) = c {
                y.set(r, c, true);
            }
        }
    }
    OutcomeMatrix::Binary(y)
}

fn covariate_value(node: &NodeRecord, name: &str) -> f64 {
    node.covariates.get(name).copied().unwrap_or(f64::NAN)
}

/// Error unless the covariate varies among the (non-missing) hires of at
/// least one office.
pub fn check_covariate_varies(net: &TemporalNetwork, plan: &DesignPlan, name: &str) -> Result<()> {
    let mut present = false;
    for o in &plan.offices {
        let mut vals = o
            .hires
            .iter()
            .map(|&i| covariate_value(net.node(i), name))
            .filter(|v| !v.is_nan());
        if let Some(first) = vals.next() {
            present = true;
            if vals.any(|v| v != first) {
                return Ok(());
            }
        }
    }
    if !present {
        return Err(Error::InvalidArgument(format!(
            "covariate `{name}` is missing for every new hire"
        )));
    }
    Err(Error::ConstantCovariate(name.to_string()))
}

fn covariate_outcomes(net: &TemporalNetwork, hires: &[NodeIdx], cols: usize, name: &str) -> OutcomeMatrix {
    let mut values = Vec::with_capacity(hires.len() * cols);
    for &i in hires {
        let c = covariate_value(net.node(i), name);
        values.extend(core::iter::repeat_n(c, cols));
    }
    OutcomeMatrix::Real {
        rows: hires.len(),
        cols,
        values,
    }
}

/// Raw per-office treatment and outcome arrays for the plan.
pub fn office_data(
    net: &TemporalNetwork,
    plan: &DesignPlan,
    spec: &[NetStat],
    opts: StatOptions,
    outcome: &OutcomeSpec,
) -> Result<Vec<OfficeData>> {
    if let OutcomeSpec::Covariate(name) = outcome {
        check_covariate_varies(net, plan, name)?;
    }
    plan.offices
        .iter()
        .map(|o| {
            let treatments = treatment_matrix(net, spec, &o.hires, &o.candidates, opts)?;
            let outcomes = match outcome {
                OutcomeSpec::Ties => tie_outcomes(net, &o.hires, &o.candidates),
                OutcomeSpec::Covariate(name) => covariate_outcomes(net, &o.hires, o.candidates.len(), name),
            };
            Ok(OfficeData {
                office_id: o.office_id.clone(),
                hires: o.hires.clone(),
                candidates: o.candidates.clone(),
                treatments,
                outcomes,
            })
        })
        .collect()
}

/// `office_data` followed by support validation.
pub fn assemble_sample(
    net: &TemporalNetwork,
    plan: &DesignPlan,
    spec: &[NetStat],
    opts: StatOptions,
    outcome: &OutcomeSpec,
    mode: SampleMode,
    sample_options: SampleOptions,
) -> Result<EstimationSample> {
    build_sample(office_data(net, plan, spec, opts, outcome)?, mode, sample_options)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// Predicate on a pre-determined node attribute, written `key<op>value`
/// with `op` one of `=`, `!=`, `<`, `<=`, `>`, `>=`. The key `office`
/// compares the office label as a string; any other key names a covariate.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NodeFilter {
    pub key: String,
    pub op: CompareOp,
    pub value: String,
}

impl NodeFilter {
    pub fn parse(text: &str) -> Result<Self> {
        let ops = [
            ("!=", CompareOp::Ne),
            ("<=", CompareOp::Le),
            (">=", CompareOp::Ge),
            ("=", CompareOp::Eq),
            ("<", CompareOp::Lt),
            (">", CompareOp::Gt),
        ];
        let bad = || Error::InvalidArgument(format!("cannot parse filter `{text}`; expected key<op>value"));
        let (at, tok, op) = ops
            .iter()
            .filter_map(|(tok, op)| text.find(tok).map(|at| (at, *tok, *op)))
            .min_by_key(|(at, tok, _)| (*at, usize::MAX - tok.len()))
            .ok_or_else(bad)?;
        let key = text[..at].trim();
        let value = text[at + tok.len()..].trim();
        if key.is_empty() || value.is_empty() {
            return Err(bad());
        }
        if key != "office" && value.parse::<f64>().is_err() {
            return Err(Error::InvalidArgument(format!(
                "filter `{text}`: covariate comparisons need a numeric value"
            )));
        }
        if key == "office" && !matches!(op, CompareOp::Eq | CompareOp::Ne) {
            return Err(Error::InvalidArgument(format!(
                "filter `{text}`: office supports only = and !="
            )));
        }
        Ok(Self {
            key: key.to_string(),
            op,
            value: value.to_string(),
        })
    }

    pub fn matches(&self, node: &NodeRecord) -> bool {
        if self.key == "office" {
            let eq = node.office.as_deref() == Some(self.value.as_str());
            return (self.op == CompareOp::Eq) == eq;
        }
        let Some(&x) = node.covariates.get(&self.key) else {
            return false;
        };
        let v: f64 = self.value.parse().unwrap_or(f64::NAN);
        match self.op {
            CompareOp::Eq => x == v,
            CompareOp::Ne => x != v,
            CompareOp::Lt => x < v,
            CompareOp::Le => x <= v,
            CompareOp::Gt => x > v,
            CompareOp::Ge => x >= v,
        }
    }
}

impl core::fmt::Display for NodeFilter {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let op = match self.op {
            CompareOp::Eq => "=",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
        };
        write!(f, "{}{}{}", self.key, op, self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PermutationSetting {
    Enumerate,
    Draws(u64),
}

/// Everything that determines an estimate report.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunConfig {
    pub treatments: Vec<String>,
    pub mode: SampleMode,
    pub permutations: PermutationSetting,
    pub seed: u64,
    pub level: f64,
    pub filter_i: Option<NodeFilter>,
    pub filter_j: Option<NodeFilter>,
    pub placebo: Option<String>,
    pub count_hire_ties: bool,
    pub rank_tol: f64,
    pub enumeration_cap: u64,
    pub table_budget: u64,
    /// Report Bonferroni-adjusted rejections over the non-intercept
    /// coefficients.
    pub bonferroni: bool,
    /// Test the null of a constant effect of this size on the single
    /// treatment coefficient instead of the null of no effect.
    pub null_shift: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            treatments: vec!["indirect_flag".into()],
            mode: SampleMode::Ipw,
            permutations: PermutationSetting::Draws(10_000),
            seed: 0,
            level: 0.95,
            filter_i: None,
            filter_j: None,
            placebo: None,
            count_hire_ties: true,
            rank_tol: DEFAULT_RANK_TOL,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            table_budget: DEFAULT_TABLE_BUDGET,
            bonferroni: false,
            null_shift: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidLevel(self.level));
        }
        if self.permutations == PermutationSetting::Draws(0) {
            return Err(Error::InvalidArgument("permutation count must be at least 1".into()));
        }
        if self.treatments.is_empty() {
            return Err(Error::InvalidArgument("no treatments requested".into()));
        }
        if self.null_shift.is_some() && self.treatments.len() != 1 {
            return Err(Error::InvalidArgument(
                "a shifted null needs exactly one treatment".into(),
            ));
        }
        if self.null_shift.is_some() && self.placebo.is_some() {
            return Err(Error::InvalidArgument(
                "a shifted null cannot be combined with a placebo outcome".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    /// Conservative standard error; absent with a single office.
    pub se: Option<f64>,
    pub p_one_sided: f64,
    pub p_two_sided: f64,
    pub ci: Option<(f64, f64)>,
    pub bonferroni_reject: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BonferroniSummary {
    pub tests: usize,
    pub alpha: f64,
    pub adjusted_alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EstimateReport {
    pub outcome: String,
    pub new_hires: usize,
    pub offices: usize,
    pub edges: usize,
    pub input_pairs: usize,
    pub coefficients: Vec<CoefficientRow>,
    pub thresholds: Vec<(String, Option<f64>)>,
    pub permutation_mode: PermutationMode,
    pub permutation_draws: usize,
    pub drops: Vec<DropRecord>,
    pub histogram_path: Option<String>,
    pub bonferroni: Option<BonferroniSummary>,
    pub seed: u64,
    pub config: RunConfig,
}

/// Intermediate products of a run, for callers that export more than the
/// report.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub plan: DesignPlan,
    pub sample: EstimationSample,
    pub fit: AggregateFit,
    pub distribution: PermutationDistribution,
}

fn shift_outcomes(sample: &mut EstimationSample, delta: f64) {
    for o in &mut sample.offices {
        let (rows, cols) = (o.outcomes.rows(), o.outcomes.cols());
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(o.outcomes.get(i, j) - delta * o.treatments.get(i, j)[1]);
            }
        }
        o.outcomes = OutcomeMatrix::Real { rows, cols, values };
    }
}

/// The full estimation pipeline on one network.
pub fn run_estimate(net: &TemporalNetwork, config: &RunConfig) -> Result<(EstimateReport, RunArtifacts)> {
    config.validate()?;
    let plan = DesignPlan::from_network(net, config.seed)?;
    let opts = StatOptions {
        count_hire_ties: config.count_hire_ties,
    };
    let mut spec = config
        .treatments
        .iter()
        .map(|t| NetStat::parse(t))
        .collect::<Result<Vec<_>>>()?;
    let thresholds = resolve_thresholds(net, &plan, &mut spec, opts)?;
    let outcome = match &config.placebo {
        Some(c) => OutcomeSpec::Covariate(c.clone()),
        None => OutcomeSpec::Ties,
    };
    let sample_options = SampleOptions {
        rank_tol: config.rank_tol,
    };
    let mut sample = assemble_sample(net, &plan, &spec, opts, &outcome, config.mode, sample_options)?;
    if config.filter_i.is_some() || config.filter_j.is_some() {
        let keep = |f: &Option<NodeFilter>, v: NodeIdx| f.as_ref().is_none_or(|f| f.matches(net.node(v)));
        sample = restrict_sample(&sample, |i| keep(&config.filter_i, i), |j| keep(&config.filter_j, j))?;
    }
    if let Some(delta) = config.null_shift {
        shift_outcomes(&mut sample, delta);
    }
    let fit = fit_sample(
        &sample,
        FitOptions {
            table_budget: config.table_budget,
            rank_tol: config.rank_tol,
        },
    )?;
    let draws = match config.permutations {
        PermutationSetting::Enumerate => Draws::Enumerate {
            cap: config.enumeration_cap,
        },
        PermutationSetting::Draws(r) => Draws::MonteCarlo {
            draws: r,
            seed: config.seed,
        },
    };
    let distribution = permutation_distribution(&fit, &sample, draws)?;
    let v_hat = match conservative_variance(&fit) {
        Ok(v) => Some(v),
        Err(Error::TooFewOffices) => {
            log::warn!("a single office: no conservative standard errors");
            None
        }
        Err(e) => return Err(e),
    };
    let tests = fit.dim().saturating_sub(1).max(1);
    let alpha = 1.0 - config.level;
    let bonferroni = config.bonferroni.then(|| BonferroniSummary {
        tests,
        alpha,
        adjusted_alpha: alpha / tests as f64,
    });
    let mut coefficients = Vec::with_capacity(fit.dim());
    for k in 0..fit.dim() {
        let r = distribution.result(k)?;
        let var = v_hat.as_ref().map(|v| v[k]);
        let ci = match var {
            Some(v) => Some(confidence_interval(fit.estimate[k], v, config.level)?),
            None => None,
        };
        coefficients.push(CoefficientRow {
            name: fit.labels[k].clone(),
            estimate: fit.estimate[k],
            se: var.map(libm::sqrt),
            p_one_sided: r.p_one_sided,
            p_two_sided: r.p_two_sided,
            ci,
            bonferroni_reject: bonferroni
                .as_ref()
                .filter(|_| k > 0)
                .map(|b| r.p_two_sided <= b.adjusted_alpha),
        });
    }
    let report = EstimateReport {
        outcome: outcome.name().to_string(),
        new_hires: sample.new_hires(),
        offices: sample.offices.len(),
        edges: sample.edges(),
        input_pairs: sample.input_pairs,
        coefficients,
        thresholds: spec.iter().map(|s| s.label().to_string()).zip(thresholds).collect(),
        permutation_mode: distribution.mode,
        permutation_draws: distribution.n_draws(),
        drops: sample.drops.clone(),
        histogram_path: None,
        bonferroni,
        seed: config.seed,
        config: config.clone(),
    };
    Ok((
        report,
        RunArtifacts {
            plan,
            sample,
            fit,
            distribution,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_network;

    fn net() -> TemporalNetwork {
        let mut nodes = Vec::new();
        for o in 0..2 {
            for h in 0..3 {
                nodes.push(
                    NodeRecord::hire(format!("h{o}{h}"), format!("o{o}"))
                        .with_covariate("female", f64::from((h % 2) as u8)),
                );
            }
        }
        for s in 0..4 {
            nodes.push(NodeRecord::new(format!("s{s}")));
        }
        let t1 = [
            ("h00", "s0"),
            ("h01", "s1"),
            ("s0", "s2"),
            ("s1", "s3"),
            ("h10", "s0"),
            ("h11", "s2"),
            ("h00", "h01"),
        ];
        let t2 = [("h00", "s2"), ("h10", "s2"), ("h01", "s3"), ("h12", "s1")];
        build_network(nodes, &t1, &t2).unwrap().0
    }

    #[test]
    fn tie_outcomes_follow_second_snapshot() {
        let n = net();
        let plan = DesignPlan::from_network(&n, 0).unwrap();
        let data = office_data(
            &n,
            &plan,
            &[NetStat::parse("indirect_flag").unwrap()],
            StatOptions::default(),
            &OutcomeSpec::Ties,
        )
        .unwrap();
        assert_eq!(data.len(), 2);
        let y = &data[0].outcomes;
        // h00 - s2 (candidate column 2)
        assert_eq!(y.get(0, 2), 1.0);
        assert_eq!(y.get(0, 3), 0.0);
        assert_eq!(y.get(1, 3), 1.0);
    }

    #[test]
    fn median_threshold_resolution() {
        let n = net();
        let plan = DesignPlan::from_network(&n, 0).unwrap();
        let mut spec = vec![NetStat::parse("high_degree").unwrap()];
        let t = resolve_thresholds(&n, &plan, &mut spec, StatOptions::default()).unwrap();
        // hire degrees 2,2,0 and 1,1,0; each repeated over 4 candidates
        assert_eq!(t, vec![Some(1.0)]);
    }

    #[test]
    fn filters_parse_and_match() {
        let f = NodeFilter::parse("female=1").unwrap();
        assert!(f.matches(&NodeRecord::new("a").with_covariate("female", 1.0)));
        assert!(!f.matches(&NodeRecord::new("a")));
        let g = NodeFilter::parse("tenure >= 2.5").unwrap();
        assert_eq!(g.op, CompareOp::Ge);
        assert_eq!(g.to_string(), "tenure>=2.5");
        let o = NodeFilter::parse("office!=NY").unwrap();
        assert!(o.matches(&NodeRecord::hire("x", "SF")));
        assert!(NodeFilter::parse("female").is_err());
        assert!(NodeFilter::parse("female=yes").is_err());
    }

    #[test]
    fn constant_placebo_covariate_rejected() {
        let mut nodes = vec![
            NodeRecord::hire("a", "o").with_covariate("c", 1.0),
            NodeRecord::hire("b", "o").with_covariate("c", 1.0),
        ];
        nodes.push(NodeRecord::new("s"));
        let (n, _) = build_network(nodes, &[("a", "s")], &[] as &[(&str, &str)]).unwrap();
        let plan = DesignPlan::from_network(&n, 0).unwrap();
        let err = check_covariate_varies(&n, &plan, "c").unwrap_err();
        assert_eq!(err, Error::ConstantCovariate("c".into()));
    }

    #[test]
    fn run_estimate_end_to_end() {
        let n = net();
        let config = RunConfig {
            permutations: PermutationSetting::Enumerate,
            mode: SampleMode::Late,
            treatments: vec!["degree".into()],
            bonferroni: true,
            ..RunConfig::default()
        };
        let (report, art) = run_estimate(&n, &config).unwrap();
        assert_eq!(report.input_pairs, report.edges + art.sample.dropped_pairs());
        assert_eq!(report.permutation_draws, 36);
        assert_eq!(report.coefficients.len(), 2);
        assert!(report.coefficients[1].bonferroni_reject.is_some());
        let first = report.coefficients[1].estimate;
        let (again, _) = run_estimate(&n, &config).unwrap();
        assert_eq!(again.coefficients[1].estimate.to_bits(), first.to_bits());
    }
}
