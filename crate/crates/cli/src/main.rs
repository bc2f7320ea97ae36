//! `netperm`: design-based effects of network position on tie formation.

mod error;
mod input;
mod output;
mod simulate;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use netperm_core::pipeline::{run_estimate, EstimateReport, NodeFilter, PermutationSetting, RunArtifacts, RunConfig};
use netperm_core::synthlab::{
    generate_world, run_oracle_on, run_oracle_sampled, OracleOptions, OracleOutcome, WorldConfig,
};
use netperm_core::{Error, SampleMode};

use error::{CliError, CliResult};
use simulate::{OracleFile, WorldFile};

#[derive(Parser)]
#[command(
    name = "netperm",
    version,
    about = "Permutation inference for effects of network position on new ties"
)]
struct Cli {
    /// Worker threads for fitting and permutation draws (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate effects with permutation p-values and conservative intervals.
    Estimate(EstimateArgs),
    /// Same pipeline with a pre-determined new-hire covariate as the outcome.
    Placebo(PlaceboArgs),
    /// Export the permutation distribution of one coefficient as CSV.
    Permtest(PermtestArgs),
    /// Generate a synthetic world, export it, and run the enumeration oracle.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Node roster: node_id, office, new_hire, then numeric covariates.
    #[arg(long)]
    nodes: PathBuf,
    /// First-snapshot edges (src,dst).
    #[arg(long)]
    edges_t1: PathBuf,
    /// Second-snapshot edges (src,dst).
    #[arg(long)]
    edges_t2: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ipw,
    Late,
}

impl From<Mode> for SampleMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Ipw => SampleMode::Ipw,
            Mode::Late => SampleMode::Late,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn parse_permutations(text: &str) -> Result<PermutationSetting, String> {
    if text == "enumerate" {
        return Ok(PermutationSetting::Enumerate);
    }
    match text.parse::<u64>() {
        Ok(0) | Err(_) => Err(format!("expected a positive count or `enumerate`, got `{text}`")),
        Ok(r) => Ok(PermutationSetting::Draws(r)),
    }
}

#[derive(Args)]
struct RunArgs {
    /// Comma list of indirect_flag, indirect_count, degree, high_degree,
    /// density, high_density, high_indirect_count; `high_*` accept
    /// `:threshold` or `:median` (default).
    #[arg(long, value_delimiter = ',', default_value = "indirect_flag")]
    treatments: Vec<String>,
    #[arg(long, value_enum, default_value = "ipw")]
    mode: Mode,
    /// Monte Carlo draw count, or `enumerate`.
    #[arg(long, default_value = "10000", value_parser = parse_permutations)]
    permutations: PermutationSetting,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Keep only hires matching `key<op>value`.
    #[arg(long)]
    filter_i: Option<String>,
    /// Keep only candidates matching `key<op>value`.
    #[arg(long)]
    filter_j: Option<String>,
    /// Ignore ties between new hires when computing statistics.
    #[arg(long)]
    no_hire_ties: bool,
    #[arg(long, default_value_t = netperm_core::design::DEFAULT_ENUMERATION_CAP)]
    enumeration_cap: u64,
    #[arg(long, default_value_t = netperm_core::design::DEFAULT_RANK_TOL)]
    rank_tol: f64,
    /// Flag Bonferroni rejections across the non-intercept coefficients.
    #[arg(long)]
    bonferroni: bool,
    /// Test a constant effect of this size on the single treatment.
    #[arg(long)]
    null_shift: Option<f64>,
}

#[derive(Args)]
struct OutputArgs {
    /// Report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Also write the permutation draws of one coefficient here.
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Coefficient for the histogram (default: first treatment).
    #[arg(long)]
    coefficient: Option<String>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Use this new-hire covariate as the outcome.
    #[arg(long)]
    placebo: Option<String>,
}

#[derive(Args)]
struct PlaceboArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// New-hire covariate used as the outcome.
    #[arg(long)]
    placebo: String,
}

#[derive(Args)]
struct PermtestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    placebo: Option<String>,
    /// Coefficient to export (default: first treatment).
    #[arg(long)]
    coefficient: Option<String>,
    /// Histogram CSV path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> CliResult<Vec<T>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::validation(format!("cannot read {what} `{t}`")))
        })
        .collect()
}

#[derive(Args)]
struct SimulateArgs {
    /// Directory for world.json, the input CSVs and the oracle files.
    #[arg(long)]
    out_dir: PathBuf,
    /// Replay an existing world file instead of generating one.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// New hires per office, comma separated.
    #[arg(long, default_value = "3,3")]
    offices: String,
    #[arg(long, default_value_t = 6)]
    seniors: usize,
    /// Team size range `min,max`.
    #[arg(long, default_value = "3,5")]
    team_size: String,
    /// Base senior-senior tie probability.
    #[arg(long, default_value_t = 0.3)]
    edge_prob: f64,
    #[arg(long, value_delimiter = ',', default_value = "indirect_flag")]
    treatments: Vec<String>,
    /// Structural coefficients, intercept first, comma separated.
    #[arg(long, default_value = "-1,1", allow_hyphen_values = true)]
    delta: String,
    #[arg(long, default_value_t = 0.0)]
    homophily: f64,
    /// Form teams from members sorted by trait plus this much noise.
    #[arg(long)]
    team_sorting: Option<f64>,
    /// Fair-coin covariates to attach to every node.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[arg(long, value_enum, default_value = "ipw")]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    max_attempts: u32,
    #[arg(long)]
    no_hire_ties: bool,
    /// Run the oracle with this covariate as the outcome.
    #[arg(long)]
    placebo: Option<String>,
    #[arg(long, default_value_t = netperm_core::design::DEFAULT_ENUMERATION_CAP)]
    enumeration_cap: u64,
    /// Sample this many permutations when the group exceeds the cap.
    #[arg(long)]
    monte_carlo: Option<u64>,
    /// Also compute a p-value for every permuted dataset.
    #[arg(long)]
    p_values: bool,
    /// Constant in the normal-approximation bound.
    #[arg(long, default_value_t = 1.0)]
    be_constant: f64,
}

fn run_config(run: &RunArgs, placebo: Option<String>) -> CliResult<RunConfig> {
    let filter = |f: &Option<String>| f.as_deref().map(NodeFilter::parse).transpose();
    let config = RunConfig {
        treatments: run.treatments.clone(),
        mode: run.mode.into(),
        permutations: run.permutations,
        seed: run.seed,
        level: run.level,
        filter_i: filter(&run.filter_i)?,
        filter_j: filter(&run.filter_j)?,
        placebo,
        count_hire_ties: !run.no_hire_ties,
        rank_tol: run.rank_tol,
        enumeration_cap: run.enumeration_cap,
        table_budget: netperm_core::estimation::DEFAULT_TABLE_BUDGET,
        bonferroni: run.bonferroni,
        null_shift: run.null_shift,
    };
    config.validate()?;
    Ok(config)
}

fn estimate(data: &DataArgs, config: &RunConfig) -> CliResult<(EstimateReport, RunArtifacts)> {
    let (net, _, _) = input::load_inputs(&data.nodes, &data.edges_t1, &data.edges_t2, config.seed)?;
    Ok(run_estimate(&net, config)?)
}

fn coefficient_index(labels: &[String], name: Option<&str>) -> CliResult<usize> {
    match name {
        Some(n) => labels
            .iter()
            .position(|l| l == n)
            .ok_or_else(|| CliError::validation(format!("no coefficient `{n}`; have {labels:?}"))),
        None => Ok(usize::from(labels.len() > 1)),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn report_command(data: &DataArgs, config: RunConfig, out: &OutputArgs) -> CliResult<()> {
    let (mut report, artifacts) = estimate(data, &config)?;
    if let Some(h) = &out.histogram {
        let k = coefficient_index(&artifacts.fit.labels, out.coefficient.as_deref())?;
        output::emit(Some(h), &output::histogram_csv(&artifacts.distribution, k)?)?;
        report.histogram_path = Some(h.display().to_string());
    }
    match out.format {
        Format::Json => output::emit(out.out.as_deref(), &output::report_json(&report)?)?,
        Format::Csv => {
            output::emit(out.out.as_deref(), &output::report_csv(&report)?)?;
            if let Some(p) = &out.out {
                output::emit(Some(&sibling(p, ".drops.csv")), &output::drops_csv(&report)?)?;
            }
        }
    }
    for d in &report.drops {
        log::info!(
            "dropped {} ({} units, {} pairs) in office `{}`",
            d.reason.code(),
            d.units,
            d.pairs,
            d.office_id
        );
    }
    Ok(())
}

fn permtest(args: &PermtestArgs) -> CliResult<()> {
    let config = run_config(&args.run, args.placebo.clone())?;
    let (_, artifacts) = estimate(&args.data, &config)?;
    let k = coefficient_index(&artifacts.fit.labels, args.coefficient.as_deref())?;
    output::emit(args.out.as_deref(), &output::histogram_csv(&artifacts.distribution, k)?)
}

fn world_config(args: &SimulateArgs) -> CliResult<WorldConfig> {
    let team: Vec<usize> = parse_list(&args.team_size, "team size")?;
    let [lo, hi] = team[..] else {
        return Err(CliError::validation("--team-size takes `min,max`"));
    };
    Ok(WorldConfig {
        office_sizes: parse_list(&args.offices, "office size")?,
        seniors_per_office: args.seniors,
        team_size: (lo, hi),
        senior_edge_prob: args.edge_prob,
        treatments: args.treatments.clone(),
        count_hire_ties: !args.no_hire_ties,
        delta: parse_list(&args.delta, "coefficient")?,
        homophily: args.homophily,
        covariates: args.covariates.clone(),
        mode: args.mode.into(),
        seed: args.seed,
        max_attempts: args.max_attempts,
        team_sorting: args.team_sorting,
    })
}

fn json_bytes<T: serde::Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let world = match &args.replay {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str::<WorldFile>(&text)?.into_world()?
        }
        None => generate_world(&world_config(args)?)?,
    };
    std::fs::create_dir_all(&args.out_dir)?;
    let dir = args.out_dir.as_path();
    std::fs::write(dir.join("world.json"), json_bytes(&WorldFile::from_world(&world))?)?;
    simulate::write_inputs(&world, dir)?;

    let outcome = match &args.placebo {
        Some(c) => OracleOutcome::Covariate(c.clone()),
        None => OracleOutcome::Structural,
    };
    let sample = match &args.placebo {
        Some(c) => world.sample_for(
            &netperm_core::pipeline::OutcomeSpec::Covariate(c.clone()),
            world.config.mode,
        )?,
        None => world.sample.clone(),
    };
    let options = OracleOptions {
        outcome,
        cap: args.enumeration_cap,
        p_values: args.p_values,
        be_constant: args.be_constant,
    };
    let mut report = match run_oracle_on(&world, &sample, &options) {
        Err(Error::CapExceeded { order, cap }) => match args.monte_carlo {
            Some(r) => {
                log::warn!("group of order {order} exceeds the cap {cap}; sampling {r} permutations");
                run_oracle_sampled(&world, &sample, &options, r, world.config.seed)?
            }
            None => return Err(Error::CapExceeded { order, cap }.into()),
        },
        other => other?,
    };
    report.estimates.clear();
    std::fs::write(dir.join("oracle.csv"), simulate::oracle_csv(&report)?)?;
    let file = OracleFile {
        format: "netperm-oracle".into(),
        version: 1,
        outcome: args.placebo.clone().unwrap_or_else(|| "ties".into()),
        seed: world.config.seed,
        report,
    };
    std::fs::write(dir.join("oracle.json"), json_bytes(&file)?)?;
    println!(
        "world: {} nodes, {} offices, {} retained pairs (attempt {}); oracle over {} permutations",
        world.network.n(),
        world.sample.offices.len(),
        world.sample.edges(),
        world.attempt,
        file.report.group_order
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::validation(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Estimate(a) => report_command(&a.data, run_config(&a.run, a.placebo.clone())?, &a.output),
        Command::Placebo(a) => report_command(&a.data, run_config(&a.run, Some(a.placebo.clone()))?, &a.output),
        Command::Permtest(a) => permtest(a),
        Command::Simulate(a) => simulate(a),
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
