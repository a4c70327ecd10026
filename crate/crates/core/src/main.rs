use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use epoa::cluster::ClusterMethod;
use epoa::consistency::PairAggregation;
use epoa::pipeline::selftest::{run_selftest, synthetic_config, SelftestParams};
use epoa::pipeline::{self, run_pipeline, PipelineConfig, PipelineError, ProviderKind, Stage};
use epoa::simgame::{
    braess_embedded, parse_network, pigou_embedded, solve, synthesize_traces, write_ground_truth, write_network,
    Detour, Objective, SolverParams, SynthParams,
};
use epoa::trace::io::{write_samples, write_school_catalog};
use epoa::trace::ModeGranularity;

#[derive(Parser)]
#[command(
    name = "epoa",
    version,
    about = "Regret, empirical price of anarchy and route consistency from location traces"
)]
struct Cli {
    /// TOML configuration; relative paths in it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment samples into morning trips and infer home/school profiles.
    Segment(StageArgs),
    /// Group comparable trips.
    Cluster(StageArgs),
    /// Per-trip regret, its distribution and epsilon.
    Regret(StageArgs),
    /// EPoA bounds against an optima provider.
    Epoa(StageArgs),
    /// Mode and route consistency across days.
    Consistency(StageArgs),
    /// Several stages in dependency order (all by default).
    Run {
        /// Comma-separated subset: segment,cluster,regret,epoa,consistency.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
        #[command(flatten)]
        args: StageArgs,
    },
    /// Solve a network and synthesize traces from its flows.
    Simulate(SimulateArgs),
    /// Validate the whole pipeline on simulated Pigou and Braess traces.
    Selftest(SelftestArgs),
    /// Print the summaries found in an output directory.
    Report(StageArgs),
}

#[derive(Args, Default)]
struct StageArgs {
    /// Location samples, one JSON object per line.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// School catalog CSV (school_id,lat,lon).
    #[arg(long)]
    schools: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Speed below which a step counts as stopped, m/s.
    #[arg(long)]
    v_stop: Option<f64>,
    /// Minimum dwell that makes a stop a point of interest, seconds.
    #[arg(long)]
    t_stop: Option<i64>,
    /// Smoothing window (odd).
    #[arg(long)]
    smooth_window: Option<usize>,
    /// How homes are grouped into origin locations.
    #[arg(long, value_enum)]
    cluster_method: Option<MethodArg>,
    /// Clustering radius in meters.
    #[arg(long)]
    r: Option<f64>,
    /// Departure window in seconds.
    #[arg(long)]
    window: Option<i64>,
    /// Mode classes that must match within a cluster.
    #[arg(long, value_enum)]
    granularity: Option<GranularityArg>,
    /// Positive regrets above this percentile are trimmed.
    #[arg(long)]
    trim: Option<f64>,
    /// Share of users allowed above epsilon.
    #[arg(long)]
    delta: Option<f64>,
    /// Source of optimal travel times.
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Optima table for the file provider.
    #[arg(long)]
    optima_table: Option<PathBuf>,
    /// Network for the simulator provider.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Band width for route consistency, meters.
    #[arg(long)]
    w: Option<f64>,
    /// How pairwise route verdicts combine per user.
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
    /// Calibrate the band width on the trips themselves.
    #[arg(long)]
    calibrate: bool,
    /// Skip duration/distance tail cleaning.
    #[arg(long)]
    no_clean: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Grid,
    DistanceRule,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    ThreeWay,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    None,
    File,
    Simulator,
    Directions,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    All,
    Majority,
}

#[derive(Clone, Copy, ValueEnum)]
enum InstanceArg {
    Pigou,
    Braess,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Equilibrium,
    Optimum,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in instance; ignored when --network is given.
    #[arg(long, value_enum, default_value = "pigou")]
    instance: InstanceArg,
    /// Network file to load instead of a built-in instance.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Flow pattern the synthetic users follow.
    #[arg(long, value_enum, default_value = "equilibrium")]
    objective: ObjectiveArg,
    /// Simulated users per day.
    #[arg(long, default_value_t = 200)]
    users: usize,
    /// Simulated weekdays.
    #[arg(long, default_value_t = 2)]
    days: usize,
    /// Gaussian position noise per axis, meters.
    #[arg(long, default_value_t = 15.0)]
    noise: f64,
    /// Share of users given an extra delay on every trip.
    #[arg(long, default_value_t = 0.0)]
    detour_fraction: f64,
    /// Delay added for detouring users, seconds.
    #[arg(long, default_value_t = 300.0)]
    detour_s: f64,
    /// Directory for the traces, catalog, ground truth and config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    /// Directory for every intermediate artifact and the report.
    #[arg(long, default_value = "selftest")]
    out: PathBuf,
    /// Radii of the sensitivity sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [200.0, 400.0, 600.0, 800.0, 1000.0])]
    r_values: Vec<f64>,
    /// Simulated users per instance.
    #[arg(long, default_value_t = 200)]
    users: usize,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Sim(#[from] epoa::simgame::SimError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("selftest failed: {0}")]
    Criteria(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "ts={} level={} target={} {}",
                buf.timestamp(),
                record.level().as_str().to_lowercase(),
                record.target(),
                record.args()
            )
        })
        .init();
}

fn load_config(cli: &Cli) -> Result<(PipelineConfig, PathBuf), CliError> {
    let (mut config, base) = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (PipelineConfig::from_toml(&text)?, base)
        }
        None => (PipelineConfig::default(), PathBuf::from(".")),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok((config, base))
}

/// Command-line paths are relative to the working directory, unlike paths
/// in the config file.
fn cwd_path(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn apply(config: &mut PipelineConfig, a: &StageArgs) {
    let set = |dst: &mut PathBuf, src: &Option<PathBuf>| {
        if let Some(p) = src {
            *dst = cwd_path(p);
        }
    };
    set(&mut config.inputs.samples, &a.samples);
    set(&mut config.inputs.schools, &a.schools);
    set(&mut config.inputs.output_dir, &a.out);
    if let Some(v) = a.v_stop {
        config.segment.v_stop_mps = v;
    }
    if let Some(v) = a.t_stop {
        config.segment.t_stop_s = v;
    }
    if let Some(v) = a.smooth_window {
        config.segment.smooth_window = v;
    }
    if let Some(m) = a.cluster_method {
        config.cluster.method = match m {
            MethodArg::Grid => ClusterMethod::Grid,
            MethodArg::DistanceRule => ClusterMethod::DistanceRule,
        };
    }
    if let Some(r) = a.r {
        config.cluster.r_m = r;
    }
    if let Some(w) = a.window {
        config.cluster.window_s = w;
    }
    if let Some(g) = a.granularity {
        config.cluster.granularity = match g {
            GranularityArg::ThreeWay => ModeGranularity::ThreeWay,
            GranularityArg::Binary => ModeGranularity::Binary,
        };
    }
    if let Some(t) = a.trim {
        config.regret.trim_percentile = t;
    }
    if let Some(d) = a.delta {
        config.regret.delta = d;
    }
    if let Some(p) = a.provider {
        config.provider.kind = match p {
            ProviderArg::None => ProviderKind::None,
            ProviderArg::File => ProviderKind::File,
            ProviderArg::Simulator => ProviderKind::Simulator,
            ProviderArg::Directions => ProviderKind::Directions,
        };
    }
    if a.optima_table.is_some() {
        config.provider.table = a.optima_table.as_deref().map(cwd_path);
    }
    if a.network.is_some() {
        config.provider.network = a.network.as_deref().map(cwd_path);
    }
    if let Some(w) = a.w {
        config.consistency.w_m = w;
    }
    if let Some(g) = a.aggregation {
        config.consistency.aggregation = match g {
            AggregationArg::All => PairAggregation::All,
            AggregationArg::Majority => PairAggregation::Majority,
        };
    }
    if a.calibrate {
        config.consistency.calibrate = true;
    }
    if a.no_clean {
        config.clean = false;
    }
}

fn run_stages(cli: &Cli, args: &StageArgs, stages: &[Stage]) -> Result<(), CliError> {
    let (mut config, base) = load_config(cli)?;
    apply(&mut config, args);
    let outcome = run_pipeline(&config, &base, stages)?;
    for path in &outcome.artifacts {
        println!("{}", path.display());
    }
    Ok(())
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<(), CliError> {
    let (net, demands) = match &a.network {
        Some(path) => parse_network(&std::fs::read_to_string(path).map_err(io_err(path))?)?,
        None => match a.instance {
            InstanceArg::Pigou => pigou_embedded(1800.0),
            InstanceArg::Braess => braess_embedded(900.0),
        },
    };
    let objective = match a.objective {
        ObjectiveArg::Equilibrium => Objective::Equilibrium,
        ObjectiveArg::Optimum => Objective::Optimum,
    };
    let flows = solve(&net, &demands, objective, &SolverParams::default())?;
    let params = SynthParams {
        n_users: a.users,
        days: a.days,
        noise_sigma_m: a.noise,
        seed: cli.seed.unwrap_or(0),
        detour: (a.detour_fraction > 0.0).then_some(Detour {
            fraction: a.detour_fraction,
            delay_s: a.detour_s,
        }),
        ..SynthParams::default()
    };
    let out = synthesize_traces(&net, &flows, &params)?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let write = |name: &str, bytes: &[u8]| -> Result<(), CliError> {
        let path = a.out.join(name);
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        println!("{}", path.display());
        Ok(())
    };
    let mut buf = Vec::new();
    write_samples(&mut buf, &out.samples).map_err(io_err(&a.out))?;
    write("samples.jsonl", &buf)?;
    let mut buf = Vec::new();
    write_school_catalog(&mut buf, &out.schools).map_err(|e| CliError::Usage(e.to_string()))?;
    write("schools.csv", &buf)?;
    let mut buf = Vec::new();
    write_ground_truth(&mut buf, &out.truth).map_err(|e| CliError::Usage(e.to_string()))?;
    write("ground_truth.csv", &buf)?;
    write("network.net", write_network(&net, &demands).as_bytes())?;
    let config = PipelineConfig {
        utc_offset_s: params.utc_offset_s,
        ..synthetic_config(params.seed, "network.net")
    };
    write("config.toml", config.to_toml().as_bytes())?;
    log::info!(
        "event=simulate objective={:?} total_cost={} relative_gap={:e} iterations={} users={} samples={}",
        objective,
        epoa::stats::fmt_sig6(flows.total_cost),
        flows.relative_gap,
        flows.iterations,
        out.truth.len(),
        out.samples.len()
    );
    Ok(())
}

fn selftest(cli: &Cli, a: &SelftestArgs) -> Result<(), CliError> {
    let params = SelftestParams {
        seed: cli.seed.unwrap_or(SelftestParams::default().seed),
        n_users: a.users,
        r_values: a.r_values.clone(),
        ..SelftestParams::default()
    };
    let report = run_selftest(&params, &a.out)?;
    for c in &report.criteria {
        println!(
            "{} [{}] {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            c.detail
        );
    }
    let failed: Vec<String> = report
        .failed()
        .iter()
        .map(|c| format!("[{}] {}", c.id, c.name))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Criteria(failed.join("; ")))
    }
}

fn report(cli: &Cli, args: &StageArgs) -> Result<(), CliError> {
    let (mut config, base) = load_config(cli)?;
    apply(&mut config, args);
    let out = base.join(&config.inputs.output_dir);
    let mut found = false;
    for name in [
        pipeline::SEGMENT_SUMMARY,
        pipeline::CLUSTER_SUMMARY,
        pipeline::REGRET_SUMMARY,
        pipeline::EPOA,
        pipeline::CONSISTENCY_SUMMARY,
    ] {
        let path = out.join(name);
        let Ok(text) = std::fs::read_to_string(&path) else {
            continue;
        };
        found = true;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        println!("== {name}");
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                if k == "provenance" || v.is_array() && v.as_array().is_some_and(|a| a.len() > 8) {
                    continue;
                }
                println!("  {k}: {v}");
            }
        }
    }
    if !found {
        return Err(CliError::Usage(format!(
            "no summaries in {}; run a stage first",
            out.display()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Segment(a) => run_stages(&cli, a, &[Stage::Segment]),
        Command::Cluster(a) => run_stages(&cli, a, &[Stage::Cluster]),
        Command::Regret(a) => run_stages(&cli, a, &[Stage::Regret]),
        Command::Epoa(a) => run_stages(&cli, a, &[Stage::Epoa]),
        Command::Consistency(a) => run_stages(&cli, a, &[Stage::Consistency]),
        Command::Run { stages, args } => {
            let parsed: Result<Vec<Stage>, CliError> = if stages.is_empty() {
                Ok(Stage::ALL.to_vec())
            } else {
                stages
                    .iter()
                    .map(|s| Stage::parse(s).ok_or_else(|| CliError::Usage(format!("unknown stage {s}"))))
                    .collect()
            };
            parsed.and_then(|st| run_stages(&cli, args, &st))
        }
        Command::Simulate(a) => simulate(&cli, a),
        Command::Selftest(a) => selftest(&cli, a),
        Command::Report(a) => report(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) | CliError::Pipeline(PipelineError::Config(_)) => ExitCode::from(2),
                CliError::Criteria(_) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
