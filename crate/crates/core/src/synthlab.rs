//! Synthetic worlds with frozen potential outcomes, counterfactual data under
//! any permutation, and exhaustive-enumeration oracles.
//!
//! Outcomes follow a threshold rule
//! `Y^d_ij = 1(d . delta + h exp(-|W_i - W_j|) + eta_ij >= 0)` with standard
//! normal traits `W` and logistic shocks `eta`, all drawn once per world.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::{Distribution, Open01};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Geometric, StandardNormal};

use crate::design::{
    assignment_probabilities, BitMatrix, DesignPlan, EstimationSample, OfficeSample, OutcomeMatrix, SampleMode,
    SampleOptions, StratifiedPermutation,
};
use crate::error::{Error, Result};
use crate::estimation::{fit_sample, pair_weights, CoefTable, FitOptions};
use crate::inference::{berry_esseen_bound, conservative_variance, permutation_distribution, Draws, PermutationMode};
use crate::linalg::SymFactor;
use crate::math::{compensated_sum, CompensatedSum};
use crate::network::{NodeIdx, NodeRecord, SnapshotId, TemporalNetwork};
use crate::pipeline::{assemble_sample, resolve_thresholds, OutcomeSpec};
use crate::treatment::{treatment_matrix, NetStat, StatOptions};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorldConfig {
    /// New hires per office.
    pub office_sizes: Vec<usize>,
    pub seniors_per_office: usize,
    /// Team sizes are drawn uniformly from this inclusive range.
    pub team_size: (usize, usize),
    /// Base probability of a senior-senior tie, damped by
    /// `exp(-h |W_k - W_l|)`.
    pub senior_edge_prob: f64,
    pub treatments: Vec<String>,
    pub count_hire_ties: bool,
    /// Structural coefficients, intercept first.
    pub delta: Vec<f64>,
    /// Homophily scale `h`.
    pub homophily: f64,
    /// Names of fair-coin node covariates drawn independently of the network.
    pub covariates: Vec<String>,
    pub mode: SampleMode,
    pub seed: u64,
    pub max_attempts: u32,
    /// When set, teams are cut from members sorted by `W + noise * N(0,1)`
    /// instead of a uniform shuffle, so hires sit near similar seniors.
    #[cfg_attr(feature = "serde", serde(default))]
    pub team_sorting: Option<f64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            office_sizes: vec![3, 3],
            seniors_per_office: 6,
            team_size: (3, 5),
            senior_edge_prob: 0.3,
            treatments: vec!["indirect_flag".into()],
            count_hire_ties: true,
            delta: vec![-1.0, 1.0],
            homophily: 0.0,
            covariates: Vec::new(),
            mode: SampleMode::Ipw,
            seed: 0,
            max_attempts: 200,
            team_sorting: None,
        }
    }
}

impl WorldConfig {
    fn validate(&self) -> Result<()> {
        if self.office_sizes.is_empty() || self.office_sizes.iter().any(|&m| m < 2) {
            return Err(Error::InvalidArgument(
                "every office needs at least two new hires".into(),
            ));
        }
        if self.delta.len() != self.treatments.len() + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.treatments.len() + 1,
                got: self.delta.len(),
            });
        }
        let (lo, hi) = self.team_size;
        if lo < 2 || hi < lo {
            return Err(Error::InvalidArgument(format!("invalid team size range {lo}..={hi}")));
        }
        let needs_density = self.treatments.iter().any(|t| t.contains("density"));
        if needs_density && lo < 3 {
            return Err(Error::InvalidArgument(
                "density treatments need teams of at least three".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.senior_edge_prob) {
            return Err(Error::InvalidArgument("senior edge probability outside [0, 1]".into()));
        }
        if self.team_sorting.is_some_and(|n| !(n >= 0.0 && n.is_finite())) {
            return Err(Error::InvalidArgument(
                "team sorting noise must be finite and non-negative".into(),
            ));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidArgument("max_attempts must be positive".into()));
        }
        Ok(())
    }

    fn stat_options(&self) -> StatOptions {
        StatOptions {
            count_hire_ties: self.count_hire_ties,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    /// Which generation attempt produced this world.
    pub attempt: u32,
    pub network: TemporalNetwork,
    pub plan: DesignPlan,
    /// Treatment spec with resolved thresholds.
    pub spec: Vec<NetStat>,
    /// Latent trait `W` per node.
    pub latent: Vec<f64>,
    /// Logistic shocks, `hires x candidates` in plan order.
    pub shocks: Vec<f64>,
    /// Realized sample in the configured mode.
    pub sample: EstimationSample,
    hire_row: Vec<usize>,
    cand_col: Vec<usize>,
    n_cands: usize,
}

fn rng_for(seed: u64, attempt: u32, component: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(attempt) * 16 + component);
    rng
}

fn logistic(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = Open01.sample(rng);
    libm::log(u / (1.0 - u))
}

struct Draw {
    nodes: Vec<NodeRecord>,
    edges: Vec<(NodeIdx, NodeIdx)>,
    latent: Vec<f64>,
    shocks: Vec<f64>,
}

fn draw_world(config: &WorldConfig, attempt: u32) -> Draw {
    let seed = config.seed;
    let mut nodes = Vec::new();
    let mut offices: Vec<(Vec<NodeIdx>, Vec<NodeIdx>)> = Vec::new();
    for (o, &m) in config.office_sizes.iter().enumerate() {
        let office = format!("office{o}");
        let hires: Vec<NodeIdx> = (0..m)
            .map(|k| {
                nodes.push(NodeRecord::hire(format!("h{o}_{k}"), office.clone()));
                nodes.len() - 1
            })
            .collect();
        let seniors: Vec<NodeIdx> = (0..config.seniors_per_office)
            .map(|k| {
                let mut rec = NodeRecord::new(format!("s{o}_{k}"));
                rec.office = Some(office.clone());
                nodes.push(rec);
                nodes.len() - 1
            })
            .collect();
        offices.push((hires, seniors));
    }
    let n = nodes.len();

    let mut rng = rng_for(seed, attempt, 2);
    let latent: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();

    let mut rng = rng_for(seed, attempt, 4);
    for name in &config.covariates {
        for node in nodes.iter_mut() {
            node.covariates
                .insert(name.clone(), f64::from(u8::from(rng.random::<bool>())));
        }
    }

    // project teams within offices
    let mut edges = Vec::new();
    let mut rng = rng_for(seed, attempt, 0);
    let mut sort_rng = rng_for(seed, attempt, 5);
    let (lo, hi) = config.team_size;
    for (hires, seniors) in &offices {
        let mut members: Vec<NodeIdx> = hires.iter().chain(seniors).copied().collect();
        members.shuffle(&mut rng);
        if let Some(noise) = config.team_sorting {
            let mut keys: Vec<(f64, NodeIdx)> = members
                .iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut sort_rng);
                    (latent[v] + noise * z, v)
                })
                .collect();
            keys.sort_by(|a, b| a.0.total_cmp(&b.0));
            members = keys.into_iter().map(|(_, v)| v).collect();
        }
        let mut teams: Vec<Vec<NodeIdx>> = Vec::new();
        let mut rest = &members[..];
        while !rest.is_empty() {
            let size = rng.random_range(lo..=hi);
            if rest.len() < lo {
                if let Some(last) = teams.last_mut() {
                    last.extend_from_slice(rest);
                } else {
                    teams.push(rest.to_vec());
                }
                break;
            }
            let take = size.min(rest.len());
            teams.push(rest[..take].to_vec());
            rest = &rest[take..];
        }
        if let Some(pos) = teams.iter().position(|t| t.len() < lo) {
            let short = teams.remove(pos);
            match teams.last_mut() {
                Some(last) => last.extend(short),
                None => teams.push(short),
            }
        }
        for team in &teams {
            for (a, &u) in team.iter().enumerate() {
                for &v in &team[a + 1..] {
                    if nodes[u].new_hire || nodes[v].new_hire {
                        edges.push((u, v));
                    }
                }
            }
        }
    }

    // homophilous senior layer via geometric skipping over pairs
    let seniors: Vec<NodeIdx> = offices.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let ns = seniors.len() as u64;
    let total = ns * ns.saturating_sub(1) / 2;
    let p0 = config.senior_edge_prob;
    if p0 > 0.0 && total > 0 {
        let mut rng = rng_for(seed, attempt, 1);
        let geo = Geometric::new(p0).expect("probability checked in validate");
        let (mut row, mut row_start) = (0u64, 0u64);
        let mut idx: u64 = 0;
        let mut first = true;
        loop {
            let skip = geo.sample(&mut rng);
            idx = if first {
                skip
            } else {
                idx.saturating_add(skip).saturating_add(1)
            };
            first = false;
            if idx >= total {
                break;
            }
            while idx >= row_start + (ns - 1 - row) {
                row_start += ns - 1 - row;
                row += 1;
            }
            let col = row + 1 + (idx - row_start);
            let (k, l) = (seniors[row as usize], seniors[col as usize]);
            let keep = libm::exp(-config.homophily * libm::fabs(latent[k] - latent[l]));
            if rng.random::<f64>() < keep {
                edges.push((k, l));
            }
        }
    }

    let n_hires: usize = config.office_sizes.iter().sum();
    let mut rng = rng_for(seed, attempt, 3);
    let shocks = (0..n_hires * seniors.len()).map(|_| logistic(&mut rng)).collect();
    Draw {
        nodes,
        edges,
        latent,
        shocks,
    }
}

impl SyntheticWorld {
    /// Rebuild a world from its frozen ingredients; the second snapshot and
    /// the realized sample are recomputed from the outcome rule.
    pub fn assemble(
        config: WorldConfig,
        attempt: u32,
        nodes: Vec<NodeRecord>,
        edges_t1: &[(NodeIdx, NodeIdx)],
        latent: Vec<f64>,
        shocks: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let (base, _) = TemporalNetwork::from_index_edges(nodes, edges_t1, &[])?;
        let n = base.n();
        if latent.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: latent.len(),
            });
        }
        let plan = DesignPlan::from_network(&base, config.seed)?;
        let opts = config.stat_options();
        let mut spec = config
            .treatments
            .iter()
            .map(|t| NetStat::parse(t))
            .collect::<Result<Vec<_>>>()?;
        resolve_thresholds(&base, &plan, &mut spec, opts)?;

        let mut hire_row = vec![usize::MAX; n];
        let mut cand_col = vec![usize::MAX; n];
        let mut r = 0;
        for o in &plan.offices {
            for &i in &o.hires {
                hire_row[i] = r;
                r += 1;
            }
        }
        let cands = plan.offices.first().map(|o| o.candidates.clone()).unwrap_or_default();
        for (c, &j) in cands.iter().enumerate() {
            cand_col[j] = c;
        }
        if shocks.len() != r * cands.len() {
            return Err(Error::DimensionMismatch {
                expected: r * cands.len(),
                got: shocks.len(),
            });
        }
        let mut world = Self {
            config,
            attempt,
            network: base,
            plan,
            spec,
            latent,
            shocks,
            sample: EstimationSample {
                mode: SampleMode::Ipw,
                dim: 0,
                labels: Vec::new(),
                offices: Vec::new(),
                drops: Vec::new(),
                input_pairs: 0,
                target_support: None,
                options: SampleOptions::default(),
            },
            hire_row,
            cand_col,
            n_cands: cands.len(),
        };

        let mut ties = Vec::new();
        for o in &world.plan.offices {
            let d = treatment_matrix(&world.network, &world.spec, &o.hires, &o.candidates, opts)?;
            for (r, &i) in o.hires.iter().enumerate() {
                for (c, &j) in o.candidates.iter().enumerate() {
                    let v = d.get(r, c);
                    if v.iter().any(|x| x.is_nan()) {
                        return Err(Error::NoIdentifyingVariation(format!(
                            "hire `{}` has an undefined treatment",
                            world.network.node(i).id
                        )));
                    }
                    if world.potential_outcome(i, j, v) {
                        ties.push((i, j));
                    }
                }
            }
        }
        let edges1: Vec<(NodeIdx, NodeIdx)> = world.network.snapshot(SnapshotId::First).edges().collect();
        let (net, _) = TemporalNetwork::from_index_edges(world.network.nodes().to_vec(), &edges1, &ties)?;
        world.network = net;
        world.sample = assemble_sample(
            &world.network,
            &world.plan,
            &world.spec,
            opts,
            &OutcomeSpec::Ties,
            world.config.mode,
            SampleOptions::default(),
        )?;
        Ok(world)
    }

    /// Shock `eta_ij` for hire `i` and candidate `j` (node indices).
    pub fn shock(&self, i: NodeIdx, j: NodeIdx) -> f64 {
        self.shocks[self.hire_row[i] * self.n_cands + self.cand_col[j]]
    }

    /// Latent surplus without the treatment term.
    pub fn baseline_surplus(&self, i: NodeIdx, j: NodeIdx) -> f64 {
        self.config.homophily * libm::exp(-libm::fabs(self.latent[i] - self.latent[j])) + self.shock(i, j)
    }

    /// `Y^d_ij`.
    pub fn potential_outcome(&self, i: NodeIdx, j: NodeIdx, d: &[f64]) -> bool {
        let index: f64 = d.iter().zip(&self.config.delta).map(|(a, b)| a * b).sum();
        index + self.baseline_surplus(i, j) >= 0.0
    }

    pub fn stat_options(&self) -> StatOptions {
        self.config.stat_options()
    }

    /// Realized sample with a different outcome or mode, on the same plan.
    pub fn sample_for(&self, outcome: &OutcomeSpec, mode: SampleMode) -> Result<EstimationSample> {
        assemble_sample(
            &self.network,
            &self.plan,
            &self.spec,
            self.stat_options(),
            outcome,
            mode,
            SampleOptions::default(),
        )
    }
}

/// Draw a world whose realized sample keeps every office (and, if
/// covariates are requested, in which each covariate varies within some
/// office), retrying with fresh draws up to `max_attempts` times.
pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut last = String::new();
    for attempt in 0..config.max_attempts {
        let draw = draw_world(config, attempt);
        let world = match SyntheticWorld::assemble(
            config.clone(),
            attempt,
            draw.nodes,
            &draw.edges,
            draw.latent,
            draw.shocks,
        ) {
            Ok(w) => w,
            Err(e @ (Error::NoIdentifyingVariation(_) | Error::ConstantCovariate(_))) => {
                last = format!("{e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        if world.sample.offices.len() != config.office_sizes.len() {
            last = "an office lost its identifying variation".into();
            continue;
        }
        let covariates_vary = config
            .covariates
            .iter()
            .all(|c| crate::pipeline::check_covariate_varies(&world.network, &world.plan, c).is_ok());
        if !covariates_vary {
            last = "a covariate is constant within every office".into();
            continue;
        }
        return Ok(world);
    }
    Err(Error::NoIdentifyingVariation(format!(
        "no valid world after {} attempts (last: {last})",
        config.max_attempts
    )))
}

/// What the oracle treats as the outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleOutcome {
    /// Ties from the structural rule, re-evaluated at counterfactual
    /// treatments.
    Structural,
    /// A pre-determined covariate (placebo): unaffected by treatment.
    Covariate(String),
}

/// Counterfactual version of `base` when the realized first snapshot is
/// relabelled by `perm`: treatment rows are permuted and outcomes are
/// re-evaluated at the new treatments.
pub fn counterfactual_sample(
    world: &SyntheticWorld,
    base: &EstimationSample,
    outcome: &OracleOutcome,
    perm: &StratifiedPermutation,
) -> Result<EstimationSample> {
    if perm.offices.len() != base.offices.len() {
        return Err(Error::NotBijection("office count mismatch".into()));
    }
    let mut offices = Vec::with_capacity(base.offices.len());
    for (o, p) in base.offices.iter().zip(&perm.offices) {
        crate::estimation::check_local_perm(p, o.m())?;
        let treatments = o.treatments.permute_rows(p);
        let outcomes = match outcome {
            OracleOutcome::Covariate(_) => o.outcomes.clone(),
            OracleOutcome::Structural => {
                let mut y = BitMatrix::zeros(o.m(), o.candidates.len());
                for (r, &i) in o.hires.iter().enumerate() {
                    for (c, &j) in o.candidates.iter().enumerate() {
                        if world.potential_outcome(i, j, treatments.get(r, c)) {
                            y.set(r, c, true);
                        }
                    }
                }
                OutcomeMatrix::Binary(y)
            }
        };
        let probabilities = assignment_probabilities(&treatments)?;
        offices.push(OfficeSample {
            office_id: o.office_id.clone(),
            hires: o.hires.clone(),
            candidates: o.candidates.clone(),
            treatments,
            outcomes,
            probabilities,
        });
    }
    Ok(EstimationSample {
        offices,
        ..base.clone_header()
    })
}

impl EstimationSample {
    fn clone_header(&self) -> Self {
        Self {
            mode: self.mode,
            dim: self.dim,
            labels: self.labels.clone(),
            offices: Vec::new(),
            drops: self.drops.clone(),
            input_pairs: self.input_pairs,
            target_support: self.target_support.clone(),
            options: self.options,
        }
    }
}

fn outcome_value(world: &SyntheticWorld, outcome: &OracleOutcome, i: NodeIdx, j: NodeIdx, d: &[f64]) -> f64 {
    match outcome {
        OracleOutcome::Structural => f64::from(u8::from(world.potential_outcome(i, j, d))),
        OracleOutcome::Covariate(name) => world.network.node(i).covariates.get(name).copied().unwrap_or(f64::NAN),
    }
}

fn gram_of<'a>(values: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut g = vec![0.0; dim * dim];
    for d in values {
        for r in 0..dim {
            for c in 0..dim {
                g[r * dim + c] += d[r] * d[c];
            }
        }
    }
    g
}

/// Per-office estimands computed directly from potential outcomes: the
/// pair average of `(sum_D dd')^-1 sum_D Y^d d`, with `D` the common target
/// support (IPW) or the column multiset (within regression).
pub fn office_estimands(
    world: &SyntheticWorld,
    sample: &EstimationSample,
    outcome: &OracleOutcome,
) -> Result<Vec<Vec<f64>>> {
    let dim = sample.dim;
    let mut out = Vec::with_capacity(sample.offices.len());
    for o in &sample.offices {
        let mut acc = vec![CompensatedSum::new(); dim];
        let mut rhs = vec![0.0; dim];
        let mut coef = vec![0.0; dim];
        let common = match sample.mode {
            SampleMode::Ipw => {
                let support = sample
                    .target_support
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("IPW sample without target support".into()))?;
                Some((
                    support,
                    SymFactor::new(&gram_of(support.iter().map(Vec::as_slice), dim), dim),
                ))
            }
            SampleMode::Late => None,
        };
        for (c, &j) in o.candidates.iter().enumerate() {
            let column: Vec<Vec<f64>> = o.column_multiset(c);
            let (values, factor): (&[Vec<f64>], SymFactor) = match &common {
                Some((support, f)) => (support.as_slice(), f.clone()),
                None => (
                    column.as_slice(),
                    SymFactor::new(&gram_of(column.iter().map(Vec::as_slice), dim), dim),
                ),
            };
            for &i in &o.hires {
                rhs.iter_mut().for_each(|v| *v = 0.0);
                for d in values {
                    let y = outcome_value(world, outcome, i, j, d);
                    for (r, x) in rhs.iter_mut().zip(d) {
                        *r += y * x;
                    }
                }
                factor.solve_into(&rhs, &mut coef);
                for (a, v) in acc.iter_mut().zip(&coef) {
                    a.add(*v);
                }
            }
        }
        let pairs = o.pairs() as f64;
        out.push(acc.iter().map(|a| a.value() / pairs).collect());
    }
    Ok(out)
}

/// `sum_j V_aj Y^{D_aj}_{bj}`: the table whose permuted diagonal sums give
/// the estimator on counterfactual data.
pub fn counterfactual_tables(
    world: &SyntheticWorld,
    sample: &EstimationSample,
    outcome: &OracleOutcome,
) -> Result<Vec<CoefTable>> {
    let dim = sample.dim;
    sample
        .offices
        .iter()
        .map(|o| {
            let w = pair_weights(o, sample.mode, sample.options.rank_tol)?;
            let m = o.m();
            let mut t = CoefTable::zeros(m, dim);
            for a in 0..m {
                for b in 0..m {
                    let mut acc = vec![CompensatedSum::new(); dim];
                    for (c, &j) in o.candidates.iter().enumerate() {
                        let y = outcome_value(world, outcome, o.hires[b], j, o.treatments.get(a, c));
                        if y != 0.0 {
                            for (s, v) in acc.iter_mut().zip(w.get(a, c)) {
                                s.add(v * y);
                            }
                        }
                    }
                    for (cell, s) in t.get_mut(a, b).iter_mut().zip(&acc) {
                        *cell = s.value();
                    }
                }
            }
            Ok(t)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOptions {
    pub outcome: OracleOutcome,
    pub cap: u64,
    /// Compute the p-value of every permutation-as-observed dataset (costs
    /// `|Pi|^2` diagonal sums).
    pub p_values: bool,
    pub be_constant: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            outcome: OracleOutcome::Structural,
            cap: 10_000,
            p_values: false,
            be_constant: 1.0,
        }
    }
}

/// Results of treating every group element's counterfactual dataset as the
/// observed one.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OracleReport {
    pub mode: SampleMode,
    pub labels: Vec<String>,
    /// Number of group elements evaluated.
    pub group_order: usize,
    pub permutation_mode: PermutationMode,
    pub realized_estimate: Vec<f64>,
    pub enumerated_mean: Vec<f64>,
    pub estimand: Vec<f64>,
    pub office_estimands: Vec<Vec<f64>>,
    /// Population variance of the estimator over the group.
    pub estimator_variance: Vec<f64>,
    /// Mean of the between-office variance estimate (two or more offices).
    pub mean_v_hat: Option<Vec<f64>>,
    /// `[coordinate][permutation]`.
    pub p_one_sided: Option<Vec<Vec<f64>>>,
    pub p_two_sided: Option<Vec<Vec<f64>>>,
    /// Estimator-side bound from the counterfactual tables, per coordinate.
    pub berry_esseen: Vec<Option<f64>>,
    pub be_constant: f64,
    /// Largest gap between a refit and the counterfactual-table shortcut.
    pub table_shortcut_error: f64,
    /// `group_order x dim`, row-major, in enumeration order.
    pub estimates: Vec<f64>,
}

impl OracleReport {
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn estimates_of(&self, k: usize) -> Vec<f64> {
        self.estimates.iter().skip(k).step_by(self.dim()).copied().collect()
    }
}

struct PermOutcome {
    estimate: Vec<f64>,
    v_hat: Option<Vec<f64>>,
    p_one: Vec<f64>,
    p_two: Vec<f64>,
    shortcut_error: f64,
}

/// Run the enumeration oracle on the world's realized sample in its
/// configured mode.
pub fn run_oracle(world: &SyntheticWorld, options: &OracleOptions) -> Result<OracleReport> {
    let sample = match &options.outcome {
        OracleOutcome::Structural => world.sample.clone(),
        OracleOutcome::Covariate(name) => world.sample_for(&OutcomeSpec::Covariate(name.clone()), world.config.mode)?,
    };
    run_oracle_on(world, &sample, options)
}

/// Enumeration oracle on an explicit realized sample (its `mode` selects the
/// estimator).
pub fn run_oracle_on(
    world: &SyntheticWorld,
    sample: &EstimationSample,
    options: &OracleOptions,
) -> Result<OracleReport> {
    let sizes: Vec<usize> = sample.offices.iter().map(OfficeSample::m).collect();
    let group: Vec<StratifiedPermutation> = crate::inference::enumerate_all(&sizes, options.cap)?;
    oracle_over(world, sample, options, &group, PermutationMode::Enumerated)
}

/// Sampled stand-in for [`run_oracle_on`] when the group is too large to
/// enumerate: the identity plus `draws` uniform group elements. Means and
/// variances in the report are then Monte Carlo estimates.
pub fn run_oracle_sampled(
    world: &SyntheticWorld,
    sample: &EstimationSample,
    options: &OracleOptions,
    draws: u64,
    seed: u64,
) -> Result<OracleReport> {
    if draws == 0 {
        return Err(Error::InvalidArgument("need at least one permutation draw".into()));
    }
    let plan = sample.design_plan(seed);
    let sizes: Vec<usize> = sample.offices.iter().map(OfficeSample::m).collect();
    let group: Vec<StratifiedPermutation> = core::iter::once(StratifiedPermutation::identity(&sizes))
        .chain((0..draws).map(|k| plan.sample_permutation(k)))
        .collect();
    oracle_over(world, sample, options, &group, PermutationMode::MonteCarlo)
}

fn oracle_over(
    world: &SyntheticWorld,
    sample: &EstimationSample,
    options: &OracleOptions,
    group: &[StratifiedPermutation],
    permutation_mode: PermutationMode,
) -> Result<OracleReport> {
    let sizes: Vec<usize> = sample.offices.iter().map(OfficeSample::m).collect();
    let dim = sample.dim;
    let m: usize = sizes.iter().sum();
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64 / m as f64).collect();
    let tilde = counterfactual_tables(world, sample, &options.outcome)?;

    let eval = |perm: &StratifiedPermutation| -> Result<PermOutcome> {
        let cf = counterfactual_sample(world, sample, &options.outcome, perm)?;
        let fit = fit_sample(&cf, FitOptions::default())?;
        let v_hat = if fit.n_offices() >= 2 {
            Some(conservative_variance(&fit)?)
        } else {
            None
        };
        let (mut p_one, mut p_two) = (Vec::new(), Vec::new());
        if options.p_values {
            let dist = permutation_distribution(&fit, &cf, Draws::Enumerate { cap: options.cap })?;
            for k in 0..dim {
                let r = dist.result(k)?;
                p_one.push(r.p_one_sided);
                p_two.push(r.p_two_sided);
            }
        }
        let mut shortcut = vec![0.0; dim];
        let mut part = vec![0.0; dim];
        for ((t, p), w) in tilde.iter().zip(&perm.offices).zip(&weights) {
            t.diagonal_sum_into(p, &mut part);
            for (s, v) in shortcut.iter_mut().zip(&part) {
                *s += w * v;
            }
        }
        let shortcut_error = shortcut
            .iter()
            .zip(&fit.estimate)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max);
        Ok(PermOutcome {
            estimate: fit.estimate,
            v_hat,
            p_one,
            p_two,
            shortcut_error,
        })
    };

    #[cfg(feature = "parallel")]
    let results: Vec<Result<PermOutcome>> = {
        use rayon::prelude::*;
        group.par_iter().map(eval).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<PermOutcome>> = group.iter().map(eval).collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let n = results.len() as f64;
    let estimates: Vec<f64> = results.iter().flat_map(|r| r.estimate.iter().copied()).collect();
    let mut enumerated_mean = Vec::with_capacity(dim);
    let mut estimator_variance = Vec::with_capacity(dim);
    for k in 0..dim {
        let mean = compensated_sum(results.iter().map(|r| r.estimate[k])) / n;
        let var = compensated_sum(results.iter().map(|r| {
            let e = r.estimate[k] - mean;
            e * e
        })) / n;
        enumerated_mean.push(mean);
        estimator_variance.push(var);
    }
    let mean_v_hat = if results.iter().all(|r| r.v_hat.is_some()) {
        Some(
            (0..dim)
                .map(|k| compensated_sum(results.iter().map(|r| r.v_hat.as_ref().map_or(0.0, |v| v[k]))) / n)
                .collect(),
        )
    } else {
        None
    };
    let collect_p = |pick: fn(&PermOutcome) -> &Vec<f64>| -> Vec<Vec<f64>> {
        (0..dim).map(|k| results.iter().map(|r| pick(r)[k]).collect()).collect()
    };
    let (p_one_sided, p_two_sided) = if options.p_values {
        (Some(collect_p(|r| &r.p_one)), Some(collect_p(|r| &r.p_two)))
    } else {
        (None, None)
    };
    let office_estimands = office_estimands(world, sample, &options.outcome)?;
    let estimand = (0..dim)
        .map(|k| compensated_sum(office_estimands.iter().zip(&weights).map(|(e, w)| w * e[k])))
        .collect();
    let table_refs: Vec<&CoefTable> = tilde.iter().collect();
    let berry_esseen = estimator_variance
        .iter()
        .enumerate()
        .map(|(k, v)| berry_esseen_bound(&table_refs, k, libm::sqrt(*v), options.be_constant).ok())
        .collect();
    Ok(OracleReport {
        mode: sample.mode,
        labels: sample.labels.clone(),
        group_order: group.len(),
        permutation_mode,
        realized_estimate: results[0].estimate.clone(),
        enumerated_mean,
        estimand,
        office_estimands,
        estimator_variance,
        mean_v_hat,
        p_one_sided,
        p_two_sided,
        berry_esseen,
        be_constant: options.be_constant,
        table_shortcut_error: results.iter().map(|r| r.shortcut_error).fold(0.0, f64::max),
        estimates,
    })
}

/// `(alpha, P(p <= alpha))` on the grid `0.01, 0.02, ..., 0.99`.
pub fn validity_grid(p_values: &[f64]) -> Vec<(f64, f64)> {
    let n = p_values.len() as f64;
    (1..=99)
        .map(|k| {
            let alpha = f64::from(k) / 100.0;
            let hits = p_values.iter().filter(|&&p| p <= alpha + 1e-12).count() as f64;
            (alpha, hits / n)
        })
        .collect()
}

/// Whether `P(p <= alpha) <= alpha` holds at every grid point.
pub fn is_valid(p_values: &[f64]) -> bool {
    validity_grid(p_values).iter().all(|&(a, f)| f <= a + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::naive_pooled_ols;

    fn small(seed: u64) -> WorldConfig {
        WorldConfig {
            office_sizes: vec![3, 2],
            seniors_per_office: 5,
            seed,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&small(3)).unwrap();
        let b = generate_world(&small(3)).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.shocks, b.shocks);
        assert_eq!(a.latent, b.latent);
    }

    #[test]
    fn second_snapshot_matches_rule() {
        let w = generate_world(&small(5)).unwrap();
        let a2 = w.network.snapshot(SnapshotId::Second);
        for o in &w.plan.offices {
            let d = treatment_matrix(&w.network, &w.spec, &o.hires, &o.candidates, w.stat_options()).unwrap();
            for (r, &i) in o.hires.iter().enumerate() {
                for (c, &j) in o.candidates.iter().enumerate() {
                    assert_eq!(a2.contains(i, j), w.potential_outcome(i, j, d.get(r, c)));
                }
            }
        }
    }

    #[test]
    fn sharp_null_world_has_constant_potential_outcomes() {
        let cfg = WorldConfig {
            delta: vec![0.0, 0.0],
            ..small(1)
        };
        let w = generate_world(&cfg).unwrap();
        for o in &w.sample.offices {
            for &i in &o.hires {
                for &j in &o.candidates {
                    assert_eq!(
                        w.potential_outcome(i, j, &[1.0, 0.0]),
                        w.potential_outcome(i, j, &[1.0, 1.0])
                    );
                }
            }
        }
        let r = run_oracle(&w, &OracleOptions::default()).unwrap();
        assert!(r.enumerated_mean[1].abs() <= 1e-10);
        assert!(r.estimand[1].abs() < 1e-12);
    }

    #[test]
    fn identity_counterfactual_is_realized_data() {
        let w = generate_world(&small(2)).unwrap();
        let sizes: Vec<usize> = w.sample.offices.iter().map(|o| o.m()).collect();
        let cf = counterfactual_sample(
            &w,
            &w.sample,
            &OracleOutcome::Structural,
            &StratifiedPermutation::identity(&sizes),
        )
        .unwrap();
        assert_eq!(cf.offices, w.sample.offices);
    }

    #[test]
    fn large_effect_estimand_counts_flipped_pairs() {
        let cfg = WorldConfig {
            delta: vec![-1.0, 50.0],
            ..small(4)
        };
        let w = generate_world(&cfg).unwrap();
        let r = run_oracle(&w, &OracleOptions::default()).unwrap();
        let mut flipped = 0.0;
        let mut total = 0.0;
        let m: usize = w.sample.offices.iter().map(|o| o.m()).sum();
        for o in &w.sample.offices {
            let (mut f, mut t) = (0.0, 0.0);
            for &i in &o.hires {
                for &j in &o.candidates {
                    let u = w.baseline_surplus(i, j) - 1.0;
                    if u < 0.0 && u + 50.0 >= 0.0 {
                        f += 1.0;
                    }
                    t += 1.0;
                }
            }
            flipped += o.m() as f64 / m as f64 * f / t;
            total += o.m() as f64 / m as f64;
        }
        assert!((total - 1.0).abs() < 1e-12);
        assert!((r.estimand[1] - flipped).abs() < 1e-12);
        assert!((r.enumerated_mean[1] - r.estimand[1]).abs() < 1e-10);
    }

    #[test]
    fn counterfactual_tables_reproduce_refits() {
        let w = generate_world(&WorldConfig {
            mode: SampleMode::Late,
            ..small(6)
        })
        .unwrap();
        let r = run_oracle(&w, &OracleOptions::default()).unwrap();
        assert!(r.table_shortcut_error < 1e-12, "{}", r.table_shortcut_error);
        assert_eq!(r.group_order, 12);
    }

    #[test]
    fn placebo_oracle_is_centered() {
        let cfg = WorldConfig {
            covariates: vec!["female".into()],
            ..small(8)
        };
        let w = generate_world(&cfg).unwrap();
        let r = run_oracle(
            &w,
            &OracleOptions {
                outcome: OracleOutcome::Covariate("female".into()),
                p_values: true,
                ..OracleOptions::default()
            },
        )
        .unwrap();
        assert!(r.estimand[1].abs() < 1e-12);
        assert!(r.enumerated_mean[1].abs() < 1e-10);
        assert!(is_valid(&r.p_one_sided.unwrap()[1]));
    }

    #[test]
    fn pooled_ols_runs_on_world() {
        let w = generate_world(&small(9)).unwrap();
        assert_eq!(naive_pooled_ols(&w.sample).unwrap().len(), 2);
    }

    #[test]
    fn sampled_oracle_starts_at_realized_data() {
        let w = generate_world(&small(10)).unwrap();
        let r = run_oracle_sampled(&w, &w.sample, &OracleOptions::default(), 40, 1).unwrap();
        assert_eq!(r.group_order, 41);
        assert_eq!(r.permutation_mode, PermutationMode::MonteCarlo);
        let fit = fit_sample(&w.sample, FitOptions::default()).unwrap();
        assert_eq!(r.realized_estimate, fit.estimate);
    }

    #[test]
    fn validity_grid_shape() {
        let g = validity_grid(&[0.5, 1.0]);
        assert_eq!(g.len(), 99);
        assert!(is_valid(&[0.5, 1.0]));
        assert!(!is_valid(&[0.01, 1.0]));
    }
}
