//! End-to-end runs from raw samples to reports.
//!
//! Stages communicate through files in the output directory, so any stage
//! can be rerun alone once its inputs exist:
//!
//! | stage         | reads                          | writes                                                        |
//! |---------------|--------------------------------|---------------------------------------------------------------|
//! | `segment`     | samples, school catalog        | `trips.jsonl`, `profiles.csv`, `segment_summary.json`         |
//! | `cluster`     | trips, profiles, catalog       | `clusters.csv`, `cluster_skipped.csv`, `cluster_summary.json` |
//! | `regret`      | trips, clusters                | `regret.csv`, `regret_inverse_cdf.{csv,svg}`, `regret_summary.json` |
//! | `epoa`        | trips, profiles, provider      | `optima.csv`, `epoa.json`                                     |
//! | `consistency` | trips                          | `consistency_users.csv`, `consistency_pairs.csv`, `consistency_summary.json` |
//!
//! Every artifact carries the configuration hash, the crate version and the
//! digests of the files it was computed from. Reruns with the same
//! configuration and inputs are byte-identical.

mod artifacts;
pub mod selftest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{
    build_clusters, locate_users, Cluster, ClusterError, ClusterKey, ClusterMethod, ClusterParams, LocationId,
};
use crate::consistency::{
    calibrate_band_width, default_candidates, mode_consistency_report, route_consistency_report, write_pair_verdicts,
    write_user_verdicts, Calibration, ConsistencyError, ModeConsistencyReport, PairAggregation, DEFAULT_BAND_WIDTH_M,
    DEFAULT_CALIBRATION_OFFSETS_M, DEFAULT_POSITIVE_JITTER_M,
};
use crate::geo::GeoPoint;
use crate::metrics::directions::{DepartureSchedule, DirectionsProvider, ReqwestTransport, API_KEY_VAR};
use crate::metrics::{
    compute_regret, epoa_bounds, epsilon_delta, lookup_optimal, parse_optima_table, regret_distribution,
    write_optima_table, EPoAReport, EpoaTrip, FileTableProvider, OptimaCache, OptimaProvider, OptimaQuery, OptimaTable,
    ProviderError, Regime, RegretDistribution, RegretRecord, RetryPolicy, SimulatorProvider,
};
use crate::parse::ParseError;
use crate::simgame::{parse_network, social_optimum, SimError, SolverParams};
use crate::stats::{fmt_sig6, nearest_rank, round_coord};
use crate::trace::io::{
    group_by_user, parse_profiles, parse_samples, parse_school_catalog, parse_trips, write_profiles, write_trips,
};
use crate::trace::{
    clean_dataset, infer_home_school, medoid_index, segment_user, select_morning_trips, LocalClock, ModeClass,
    ModeGranularity, MorningWindow, ProfileParams, SchoolCatalog, SegmentParams, TraceError, Trip, UserId, UserProfile,
};

use artifacts::{csv_bytes, load, write_json, write_with_header, Loaded};
pub use artifacts::{inverse_cdf_svg, round_json, sha256_hex, strip_comments, Provenance, VERSION};

/// Catalog entries this close together are one destination.
pub const SCHOOL_MERGE_RADIUS_M: f64 = 100.0;

pub const TRIPS: &str = "trips.jsonl";
pub const PROFILES: &str = "profiles.csv";
pub const SEGMENT_SUMMARY: &str = "segment_summary.json";
pub const CLUSTERS: &str = "clusters.csv";
pub const CLUSTER_SKIPPED: &str = "cluster_skipped.csv";
pub const CLUSTER_SUMMARY: &str = "cluster_summary.json";
pub const REGRET: &str = "regret.csv";
pub const REGRET_CDF: &str = "regret_inverse_cdf.csv";
pub const REGRET_SVG: &str = "regret_inverse_cdf.svg";
pub const REGRET_SUMMARY: &str = "regret_summary.json";
pub const OPTIMA: &str = "optima.csv";
pub const EPOA: &str = "epoa.json";
pub const CONSISTENCY_USERS: &str = "consistency_users.csv";
pub const CONSISTENCY_PAIRS: &str = "consistency_pairs.csv";
pub const CONSISTENCY_SUMMARY: &str = "consistency_summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Segment,
    Cluster,
    Regret,
    Epoa,
    Consistency,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Segment,
        Stage::Cluster,
        Stage::Regret,
        Stage::Epoa,
        Stage::Consistency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Segment => "segment",
            Stage::Cluster => "cluster",
            Stage::Regret => "regret",
            Stage::Epoa => "epoa",
            Stage::Consistency => "consistency",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }

    /// Artifacts the stage reads, with the stage that writes each.
    pub fn prerequisites(self) -> &'static [(&'static str, Stage)] {
        match self {
            Stage::Segment => &[],
            Stage::Cluster => &[(TRIPS, Stage::Segment), (PROFILES, Stage::Segment)],
            Stage::Regret => &[(TRIPS, Stage::Segment), (CLUSTERS, Stage::Cluster)],
            Stage::Epoa => &[(TRIPS, Stage::Segment), (PROFILES, Stage::Segment)],
            Stage::Consistency => &[(TRIPS, Stage::Segment)],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} needs {artifact}, which is missing; run the {producer} stage first")]
    MissingPrerequisite {
        stage: Stage,
        artifact: PathBuf,
        producer: Stage,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error("encoding artifact: {0}")]
    Encode(String),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn parse(path: &Path, e: impl fmt::Display) -> Self {
        PipelineError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsConfig {
    /// JSON Lines location samples.
    pub samples: PathBuf,
    /// `school_id,lat,lon` catalog.
    pub schools: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for InputsConfig {
    fn default() -> Self {
        InputsConfig {
            samples: "samples.jsonl".into(),
            schools: "schools.csv".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegretConfig {
    /// Positive regrets above this nearest-rank percentile are trimmed.
    pub trim_percentile: f64,
    pub delta: f64,
}

impl Default for RegretConfig {
    fn default() -> Self {
        RegretConfig {
            trim_percentile: 95.0,
            delta: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    None,
    /// A stored optima table.
    File,
    /// Social optimum of a network file.
    Simulator,
    /// The external directions web service.
    Directions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Optima table for `file`.
    pub table: Option<PathBuf>,
    /// Network file for `simulator`.
    pub network: Option<PathBuf>,
    /// Grid cell size used to group homes into query origins.
    pub grid_cell_m: f64,
    pub requests_per_second: f64,
    pub cache_dir: Option<PathBuf>,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// Fixed departure instants (epoch seconds) for the web service; when
    /// absent, the next Tuesday and Sunday mornings are used.
    pub heavy_departures: Option<Vec<i64>>,
    pub light_departure: Option<i64>,
    pub transit_departure: Option<i64>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::None,
            table: None,
            network: None,
            grid_cell_m: 400.0,
            requests_per_second: 10.0,
            cache_dir: None,
            api_key_env: API_KEY_VAR.to_string(),
            heavy_departures: None,
            light_departure: None,
            transit_departure: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub w_m: f64,
    pub aggregation: PairAggregation,
    /// Granularity at which a user must keep one mode to be compared.
    pub mode_granularity: ModeGranularity,
    /// Replace `w_m` by a calibrated width.
    pub calibrate: bool,
    pub calibration_offsets_m: Vec<f64>,
    pub calibration_trips: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            w_m: DEFAULT_BAND_WIDTH_M,
            aggregation: PairAggregation::All,
            mode_granularity: ModeGranularity::ThreeWay,
            calibrate: false,
            calibration_offsets_m: DEFAULT_CALIBRATION_OFFSETS_M.to_vec(),
            calibration_trips: 50,
        }
    }
}

/// Everything a run depends on. Relative paths resolve against the
/// directory the run is anchored at (the config file's directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub utc_offset_s: i64,
    /// Drop the duration/distance tails of the morning trips.
    pub clean: bool,
    pub inputs: InputsConfig,
    pub segment: SegmentParams,
    pub profile: ProfileParams,
    pub morning: MorningWindow,
    pub cluster: ClusterParams,
    pub regret: RegretConfig,
    pub provider: ProviderConfig,
    pub consistency: ConsistencyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            utc_offset_s: 8 * 3600,
            clean: true,
            inputs: InputsConfig::default(),
            segment: SegmentParams::default(),
            profile: ProfileParams::default(),
            morning: MorningWindow::default(),
            cluster: ClusterParams::default(),
            regret: RegretConfig::default(),
            provider: ProviderConfig::default(),
            consistency: ConsistencyConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// sha256 of the canonical JSON form; any field change changes it.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn profile_params(&self) -> ProfileParams {
        ProfileParams {
            utc_offset_s: self.utc_offset_s,
            ..self.profile
        }
    }

    fn morning_window(&self) -> MorningWindow {
        MorningWindow {
            utc_offset_s: self.utc_offset_s,
            ..self.morning
        }
    }

    pub(crate) fn cluster_params(&self) -> ClusterParams {
        ClusterParams {
            utc_offset_s: self.utc_offset_s,
            ..self.cluster
        }
    }

    /// Parameter checks, plus everything the requested stages need from the
    /// environment, done before any work starts.
    pub fn validate(&self, stages: &[Stage]) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.segment.validate()?;
        let r = &self.regret;
        if !(r.trim_percentile > 0.0 && r.trim_percentile <= 100.0) {
            return bad(format!(
                "regret.trim_percentile must be in (0, 100], got {}",
                r.trim_percentile
            ));
        }
        if !(r.delta > 0.0 && r.delta < 1.0) {
            return bad(format!("regret.delta must be in (0, 1), got {}", r.delta));
        }
        if !(self.cluster.r_m.is_finite() && self.cluster.r_m > 0.0) || self.cluster.window_s <= 0 {
            return bad("cluster.r_m and cluster.window_s must be > 0".into());
        }
        if !(self.consistency.w_m.is_finite() && self.consistency.w_m > 0.0) {
            return bad(format!("consistency.w_m must be > 0, got {}", self.consistency.w_m));
        }
        if stages.contains(&Stage::Epoa) {
            let p = &self.provider;
            if !(p.grid_cell_m.is_finite() && p.grid_cell_m > 0.0) {
                return bad("provider.grid_cell_m must be > 0".into());
            }
            match p.kind {
                ProviderKind::None => {
                    return bad("stage epoa needs provider.kind = file, simulator or directions".into())
                }
                ProviderKind::File if p.table.is_none() => {
                    return bad("provider.kind = file needs provider.table".into())
                }
                ProviderKind::Simulator if p.network.is_none() => {
                    return bad("provider.kind = simulator needs provider.network".into())
                }
                ProviderKind::Directions => match std::env::var(&p.api_key_env) {
                    Ok(k) if !k.trim().is_empty() => {}
                    _ => return Err(ProviderError::MissingCredential(p.api_key_env.clone()).into()),
                },
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnresolvedUser {
    pub user: UserId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentSummary {
    pub users: usize,
    pub profiled_users: usize,
    pub unresolved: Vec<UnresolvedUser>,
    pub segmentation_errors: Vec<UnresolvedUser>,
    pub trips_total: usize,
    pub morning_trips: usize,
    pub removed_by_cleaning: usize,
    pub cleaning_skipped: bool,
    pub trips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub method: ClusterMethod,
    pub r_m: f64,
    pub window_s: i64,
    pub clusters: usize,
    pub clustered_trips: usize,
    pub singleton_clusters: usize,
    pub skipped_trips: usize,
    pub locations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretSummary {
    pub records: usize,
    pub clusters: usize,
    pub zero_regret: usize,
    pub positive: usize,
    pub retained: usize,
    pub trimmed: usize,
    pub trim_percentile: f64,
    pub trim_threshold_s: Option<f64>,
    pub mean_s: f64,
    pub median_s: f64,
    /// Nearest-rank 95th percentile of the positive regrets.
    pub p95_s: f64,
    pub delta: f64,
    pub epsilon_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpoaSummary {
    pub provider: ProviderKind,
    pub grid_cell_m: f64,
    pub queries: usize,
    pub trips_without_profile: usize,
    #[serde(flatten)]
    pub report: EPoAReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeCounts {
    pub eligible: usize,
    pub ineligible: usize,
    pub consistent_by_class: BTreeMap<ModeClass, usize>,
    pub consistent_public: usize,
    pub consistent_private: usize,
    pub consistent_total: usize,
    pub consistent_fraction: f64,
}

impl From<&ModeConsistencyReport> for ModeCounts {
    fn from(r: &ModeConsistencyReport) -> Self {
        ModeCounts {
            eligible: r.eligible,
            ineligible: r.ineligible,
            consistent_by_class: r.consistent_by_class.clone(),
            consistent_public: r.consistent_public,
            consistent_private: r.consistent_private,
            consistent_total: r.consistent_total,
            consistent_fraction: r.consistent_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencySummary {
    pub w_m: f64,
    pub calibration: Option<Calibration>,
    pub aggregation: PairAggregation,
    pub mode_three_way: ModeCounts,
    pub mode_binary: ModeCounts,
    pub route_evaluated: usize,
    pub route_consistent: usize,
    pub route_fraction: f64,
    pub route_errors: usize,
}

/// In-memory results of the stages that ran.
#[derive(Debug, Clone, Default)]
pub struct PipelineOutcome {
    pub config_hash: String,
    pub segment: Option<SegmentSummary>,
    pub clusters: Option<ClusterSummary>,
    pub regret: Option<(Vec<RegretRecord>, RegretDistribution, RegretSummary)>,
    pub epoa: Option<EpoaSummary>,
    pub consistency: Option<ConsistencySummary>,
    pub artifacts: Vec<PathBuf>,
}

struct Run<'a> {
    config: &'a PipelineConfig,
    base: &'a Path,
    out: PathBuf,
    hash: String,
    artifacts: Vec<PathBuf>,
}

impl Run<'_> {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.artifacts.push(p.clone());
        p
    }

    fn read_artifact(&self, name: &str) -> Result<Loaded, PipelineError> {
        load(&self.out.join(name))
    }

    fn provenance(&self, inputs: &[&Loaded]) -> Provenance {
        inputs
            .iter()
            .fold(Provenance::new(&self.hash), |p, l| p.with_input(&l.name, &l.digest))
    }
}

fn parsed<T>(path: &Path, r: Result<T, ParseError>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError::parse(path, e))
}

/// Run `stages` (in dependency order, whatever order they are given in).
/// `base_dir` anchors relative paths in the configuration.
pub fn run_pipeline(
    config: &PipelineConfig,
    base_dir: &Path,
    stages: &[Stage],
) -> Result<PipelineOutcome, PipelineError> {
    let stages: BTreeSet<Stage> = stages.iter().copied().collect();
    let stage_list: Vec<Stage> = stages.iter().copied().collect();
    config.validate(&stage_list)?;
    let mut run = Run {
        config,
        base: base_dir,
        out: PathBuf::new(),
        hash: config.hash(),
        artifacts: Vec::new(),
    };
    run.out = run.resolve(&config.inputs.output_dir);
    for &stage in &stages {
        for &(artifact, producer) in stage.prerequisites() {
            let path = run.out.join(artifact);
            if !stages.contains(&producer) && !path.exists() {
                return Err(PipelineError::MissingPrerequisite {
                    stage,
                    artifact: path,
                    producer,
                });
            }
        }
    }
    std::fs::create_dir_all(&run.out).map_err(|e| PipelineError::io(&run.out, e))?;
    log::info!(
        "event=pipeline_start config_hash={} stages={}",
        &run.hash[..16],
        stage_list.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",")
    );
    let mut outcome = PipelineOutcome {
        config_hash: run.hash.clone(),
        ..Default::default()
    };
    for stage in stage_list {
        log::info!("event=stage_start stage={stage}");
        match stage {
            Stage::Segment => outcome.segment = Some(stage_segment(&mut run)?),
            Stage::Cluster => outcome.clusters = Some(stage_cluster(&mut run)?),
            Stage::Regret => outcome.regret = Some(stage_regret(&mut run)?),
            Stage::Epoa => outcome.epoa = Some(stage_epoa(&mut run)?),
            Stage::Consistency => outcome.consistency = Some(stage_consistency(&mut run)?),
        }
        log::info!("event=stage_done stage={stage}");
    }
    outcome.artifacts = run.artifacts;
    Ok(outcome)
}

fn load_catalog(run: &Run) -> Result<(Loaded, SchoolCatalog), PipelineError> {
    let path = run.resolve(&run.config.inputs.schools);
    let file = load(&path)?;
    let schools = parsed(&path, parse_school_catalog(&file.text))?;
    Ok((file, SchoolCatalog::new(schools, SCHOOL_MERGE_RADIUS_M)))
}

fn load_trips(run: &Run) -> Result<(Loaded, Vec<Trip>), PipelineError> {
    let file = run.read_artifact(TRIPS)?;
    let trips = parsed(&run.out.join(TRIPS), parse_trips(&file.text))?;
    Ok((file, trips))
}

fn load_profiles(run: &Run) -> Result<(Loaded, BTreeMap<UserId, UserProfile>), PipelineError> {
    let file = run.read_artifact(PROFILES)?;
    let profiles = parsed(&run.out.join(PROFILES), parse_profiles(&file.text))?;
    Ok((file, profiles.into_iter().map(|p| (p.user.clone(), p)).collect()))
}

fn stage_segment(run: &mut Run) -> Result<SegmentSummary, PipelineError> {
    let cfg = run.config;
    let samples_path = run.resolve(&cfg.inputs.samples);
    let samples_file = load(&samples_path)?;
    let samples = parsed(&samples_path, parse_samples(&samples_file.text))?;
    let (catalog_file, catalog) = load_catalog(run)?;
    let users: Vec<_> = group_by_user(samples).into_iter().collect();
    let profile_params = cfg.profile_params();
    let per_user: Vec<_> = users
        .par_iter()
        .map(|(user, s)| {
            (
                user.clone(),
                infer_home_school(s, &catalog, &profile_params),
                segment_user(s, &cfg.segment),
            )
        })
        .collect();
    let mut profiles = Vec::new();
    let mut unresolved = Vec::new();
    let mut segmentation_errors = Vec::new();
    let mut all_trips = Vec::new();
    for (user, profile, seg) in per_user {
        match profile {
            Ok(p) => profiles.push(p),
            Err(e) => unresolved.push(UnresolvedUser {
                user: user.clone(),
                reason: e.to_string(),
            }),
        }
        match seg {
            Ok(s) => all_trips.extend(s.trips),
            Err(e) => segmentation_errors.push(UnresolvedUser {
                user,
                reason: e.to_string(),
            }),
        }
    }
    let by_user: BTreeMap<UserId, UserProfile> = profiles.iter().map(|p| (p.user.clone(), p.clone())).collect();
    let morning = select_morning_trips(&all_trips, &by_user, &cfg.morning_window());
    let (trips, removed, skipped) = if cfg.clean {
        let c = clean_dataset(&morning);
        (c.trips, c.removed, c.too_small)
    } else {
        (morning.clone(), 0, true)
    };

    let prov = run.provenance(&[&samples_file, &catalog_file]);
    let mut body = Vec::new();
    write_trips(&mut body, &trips).map_err(|e| PipelineError::Encode(e.to_string()))?;
    let path = run.artifact(TRIPS);
    write_with_header(&path, &prov, &body)?;
    let mut body = Vec::new();
    write_profiles(&mut body, &profiles).map_err(|e| PipelineError::Encode(e.to_string()))?;
    let path = run.artifact(PROFILES);
    write_with_header(&path, &prov, &body)?;
    let summary = SegmentSummary {
        users: users.len(),
        profiled_users: profiles.len(),
        unresolved,
        segmentation_errors,
        trips_total: all_trips.len(),
        morning_trips: morning.len(),
        removed_by_cleaning: removed,
        cleaning_skipped: skipped,
        trips: trips.len(),
    };
    let path = run.artifact(SEGMENT_SUMMARY);
    write_json(&path, &prov, &summary)?;
    log::info!(
        "event=segment users={} profiled={} trips_total={} morning={} kept={}",
        summary.users,
        summary.profiled_users,
        summary.trips_total,
        summary.morning_trips,
        summary.trips
    );
    Ok(summary)
}

fn cluster_id(k: &ClusterKey) -> String {
    format!("{}|{}|{}|{}|{}", k.location, k.day, k.window, k.school, k.mode)
}

const CLUSTER_HEADER: [&str; 10] = [
    "cluster_id",
    "trip_id",
    "user_id",
    "location_id",
    "day",
    "window",
    "school_id",
    "mode_class",
    "centroid_lat",
    "centroid_lon",
];

fn stage_cluster(run: &mut Run) -> Result<ClusterSummary, PipelineError> {
    let (trips_file, trips) = load_trips(run)?;
    let (profiles_file, profiles) = load_profiles(run)?;
    let (catalog_file, catalog) = load_catalog(run)?;
    let params = run.config.cluster_params();
    let set = build_clusters(&trips, &profiles, Some(&catalog), &params)?;
    let prov = run.provenance(&[&trips_file, &profiles_file, &catalog_file]);

    let body = csv_bytes(|w| {
        w.write_record(CLUSTER_HEADER)?;
        for c in &set.clusters {
            let id = cluster_id(&c.key);
            for &m in &c.members {
                let t = &trips[m];
                w.write_record([
                    id.as_str(),
                    &t.id(),
                    t.user.0.as_str(),
                    c.key.location.0.as_str(),
                    &c.key.day.to_string(),
                    &c.key.window.to_string(),
                    &c.key.school,
                    c.key.mode.as_str(),
                    &round_coord(c.centroid.lat).to_string(),
                    &round_coord(c.centroid.lon).to_string(),
                ])?;
            }
        }
        Ok(())
    })?;
    let path = run.artifact(CLUSTERS);
    write_with_header(&path, &prov, &body)?;
    let body = csv_bytes(|w| {
        w.write_record(["trip_id", "reason"])?;
        for s in &set.skipped {
            w.write_record([&s.trip_id, &s.reason])?;
        }
        Ok(())
    })?;
    let path = run.artifact(CLUSTER_SKIPPED);
    write_with_header(&path, &prov, &body)?;
    let summary = ClusterSummary {
        method: params.method,
        r_m: params.r_m,
        window_s: params.window_s,
        clusters: set.clusters.len(),
        clustered_trips: set.clusters.iter().map(|c| c.members.len()).sum(),
        singleton_clusters: set.clusters.iter().filter(|c| c.members.len() == 1).count(),
        skipped_trips: set.skipped.len(),
        locations: set.locations.values().collect::<BTreeSet<_>>().len(),
    };
    let path = run.artifact(CLUSTER_SUMMARY);
    write_json(&path, &prov, &summary)?;
    log::info!(
        "event=cluster method={} r_m={} clusters={} skipped={}",
        params.method.as_str(),
        params.r_m,
        summary.clusters,
        summary.skipped_trips
    );
    Ok(summary)
}

/// Read back a cluster assignment file against the trips it was built from.
pub fn parse_cluster_assignments(text: &str, trips: &[Trip]) -> Result<Vec<Cluster>, ParseError> {
    let index: BTreeMap<String, usize> = trips.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| ParseError::new(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != CLUSTER_HEADER {
        return Err(ParseError::new(
            1,
            format!("expected header {}", CLUSTER_HEADER.join(",")),
        ));
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ParseError::new(0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != CLUSTER_HEADER.len() {
            return Err(ParseError::new(line, "wrong field count"));
        }
        let member = *index
            .get(&rec[1])
            .ok_or_else(|| ParseError::new(line, format!("unknown trip {}", &rec[1])))?;
        let num = |i: usize, what: &str| crate::parse::parse_f64(&rec[i], line, what);
        let int = |i: usize, what: &str| {
            rec[i]
                .parse::<i64>()
                .map_err(|_| ParseError::new(line, format!("{what}: expected an integer")))
        };
        match by_id.get(&rec[0]) {
            Some(&c) => clusters[c].members.push(member),
            None => {
                let key = ClusterKey {
                    location: LocationId(rec[3].to_string()),
                    day: int(4, "day")?,
                    window: int(5, "window")?,
                    school: rec[6].to_string(),
                    mode: ModeClass::parse(&rec[7])
                        .ok_or_else(|| ParseError::new(line, format!("unknown mode class {}", &rec[7])))?,
                };
                let centroid = GeoPoint::new(num(8, "centroid_lat")?, num(9, "centroid_lon")?)
                    .map_err(|e| ParseError::new(line, e.to_string()))?;
                by_id.insert(rec[0].to_string(), clusters.len());
                clusters.push(Cluster {
                    key,
                    members: vec![member],
                    centroid,
                });
            }
        }
    }
    Ok(clusters)
}

fn stage_regret(run: &mut Run) -> Result<(Vec<RegretRecord>, RegretDistribution, RegretSummary), PipelineError> {
    let (trips_file, trips) = load_trips(run)?;
    let clusters_file = run.read_artifact(CLUSTERS)?;
    let clusters = parsed(
        &run.out.join(CLUSTERS),
        parse_cluster_assignments(&clusters_file.text, &trips),
    )?;
    let per_cluster: Vec<Vec<RegretRecord>> = clusters.par_iter().map(|c| compute_regret(c, &trips)).collect();
    let records: Vec<RegretRecord> = per_cluster.into_iter().flatten().collect();
    let cfg = run.config.regret;
    let dist = regret_distribution(&records, cfg.trim_percentile);
    let summary = RegretSummary {
        records: records.len(),
        clusters: clusters.len(),
        zero_regret: records.iter().filter(|r| r.regret_s == 0.0).count(),
        positive: dist.positive.len(),
        retained: dist.retained.len(),
        trimmed: dist.trimmed_count(),
        trim_percentile: cfg.trim_percentile,
        trim_threshold_s: dist.trim_threshold_s,
        mean_s: dist.mean_s,
        median_s: dist.median_s,
        p95_s: if dist.positive.is_empty() {
            0.0
        } else {
            nearest_rank(&dist.positive, 95.0)
        },
        delta: cfg.delta,
        epsilon_s: epsilon_delta(&dist, cfg.delta),
    };
    let prov = run.provenance(&[&trips_file, &clusters_file]);
    let body = csv_bytes(|w| {
        w.write_record([
            "trip_id",
            "user_id",
            "cluster_id",
            "duration_s",
            "regret_s",
            "is_baseline",
        ])?;
        for r in &records {
            w.write_record([
                r.trip_id.as_str(),
                r.user.0.as_str(),
                &cluster_id(&r.cluster),
                &r.duration_s.to_string(),
                &fmt_sig6(r.regret_s),
                &r.is_baseline.to_string(),
            ])?;
        }
        Ok(())
    })?;
    let path = run.artifact(REGRET);
    write_with_header(&path, &prov, &body)?;
    let cdf = dist.inverse_cdf();
    let body = csv_bytes(|w| {
        w.write_record(["regret_seconds", "fraction_geq"])?;
        for (x, f) in &cdf {
            w.write_record([fmt_sig6(*x), fmt_sig6(*f)])?;
        }
        Ok(())
    })?;
    let path = run.artifact(REGRET_CDF);
    write_with_header(&path, &prov, &body)?;
    let path = run.artifact(REGRET_SVG);
    let svg = format!(
        "<!-- config_hash={} version={} -->\n{}",
        prov.config_hash,
        prov.version,
        inverse_cdf_svg(&cdf)
    );
    artifacts::write_file(&path, svg.as_bytes())?;
    let path = run.artifact(REGRET_SUMMARY);
    write_json(&path, &prov, &summary)?;
    log::info!(
        "event=regret records={} positive={} mean_s={} median_s={} epsilon_s={}",
        summary.records,
        summary.positive,
        fmt_sig6(summary.mean_s),
        fmt_sig6(summary.median_s),
        fmt_sig6(summary.epsilon_s)
    );
    Ok((records, dist, summary))
}

fn build_provider(run: &Run) -> Result<(Box<dyn OptimaProvider>, Option<Loaded>), PipelineError> {
    let p = &run.config.provider;
    Ok(match p.kind {
        ProviderKind::None => return Err(PipelineError::Config("no optima provider configured".into())),
        ProviderKind::File => {
            let path = run.resolve(p.table.as_deref().expect("validated"));
            let file = load(&path)?;
            let table = parsed(&path, parse_optima_table(&file.text))?;
            (Box::new(FileTableProvider::new(table)), Some(file))
        }
        ProviderKind::Simulator => {
            let path = run.resolve(p.network.as_deref().expect("validated"));
            let file = load(&path)?;
            let (net, demands) = parse_network(&file.text)?;
            let optimum = social_optimum(&net, &demands, &SolverParams::default())?;
            if !optimum.converged {
                return Err(SimError::NotConverged {
                    gap: optimum.relative_gap,
                    iterations: optimum.iterations,
                }
                .into());
            }
            (Box::new(SimulatorProvider::new(net, demands, optimum)), Some(file))
        }
        ProviderKind::Directions => {
            let key =
                std::env::var(&p.api_key_env).map_err(|_| ProviderError::MissingCredential(p.api_key_env.clone()))?;
            let clock = LocalClock::new(run.config.utc_offset_s);
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs() as i64);
            let next = DepartureSchedule::next_after(now, clock);
            let schedule = DepartureSchedule {
                heavy: p.heavy_departures.clone().unwrap_or(next.heavy),
                light: p.light_departure.unwrap_or(next.light),
                transit: p.transit_departure.unwrap_or(next.transit),
            };
            let transport = ReqwestTransport::new(Duration::from_secs(30))?;
            let cache = p.cache_dir.as_deref().map(|d| run.resolve(d));
            (
                Box::new(DirectionsProvider::new(
                    Box::new(transport),
                    key,
                    schedule,
                    p.requests_per_second,
                    cache,
                )),
                None,
            )
        }
    })
}

fn stage_epoa(run: &mut Run) -> Result<EpoaSummary, PipelineError> {
    let (trips_file, trips) = load_trips(run)?;
    let (profiles_file, profiles) = load_profiles(run)?;
    let (provider, provider_file) = build_provider(run)?;
    let cfg = &run.config.provider;

    let with_profile: BTreeMap<UserId, UserProfile> = trips
        .iter()
        .filter_map(|t| profiles.get(&t.user).map(|p| (t.user.clone(), p.clone())))
        .collect();
    let locations = locate_users(
        &with_profile,
        ClusterMethod::Grid,
        cfg.grid_cell_m,
        run.config.cluster.max_points,
    )?;

    // (location, school) -> users and binary modes seen there
    let mut groups: BTreeMap<(LocationId, String), (BTreeSet<UserId>, BTreeSet<ModeClass>)> = BTreeMap::new();
    let mut epoa_trips = Vec::new();
    let mut without_profile = 0;
    for t in &trips {
        let Some(p) = with_profile.get(&t.user) else {
            without_profile += 1;
            continue;
        };
        let loc = locations[&t.user].clone();
        let g = groups.entry((loc.clone(), p.school_id.clone())).or_default();
        g.0.insert(t.user.clone());
        if let Ok(m) = crate::trace::principal_mode(t, ModeGranularity::Binary) {
            g.1.insert(m);
        }
        epoa_trips.push(EpoaTrip {
            trip: t,
            location: loc,
            school_id: p.school_id.clone(),
        });
    }
    let mut queries = Vec::new();
    for ((loc, school), (users, modes)) in &groups {
        let homes: Vec<GeoPoint> = users.iter().map(|u| with_profile[u].home).collect();
        let origin = homes[medoid_index(&homes)];
        let destination = with_profile[users.iter().next().expect("non-empty group")].school_location;
        for &mode in modes {
            for &regime in Regime::for_mode(mode) {
                queries.push(OptimaQuery {
                    cluster_id: loc.clone(),
                    origin,
                    school_id: school.clone(),
                    destination,
                    mode,
                    regime,
                });
            }
        }
    }
    let cache = OptimaCache::new();
    let retry = RetryPolicy::default();
    let rows = queries
        .par_iter()
        .map(|q| lookup_optimal(&cache, provider.as_ref(), q, &retry))
        .collect::<Result<Vec<_>, _>>()?;
    let table = OptimaTable::from_rows(rows);
    let mut report = epoa_bounds(&epoa_trips, &table);
    if without_profile > 0 {
        report.dropped.insert("no_profile".into(), without_profile);
    }

    let mut inputs = vec![&trips_file, &profiles_file];
    if let Some(f) = &provider_file {
        inputs.push(f);
    }
    let prov = run.provenance(&inputs);
    let mut body = Vec::new();
    write_optima_table(&mut body, table.rows()).map_err(|e| PipelineError::Encode(e.to_string()))?;
    let path = run.artifact(OPTIMA);
    write_with_header(&path, &prov, &body)?;
    let summary = EpoaSummary {
        provider: cfg.kind,
        grid_cell_m: cfg.grid_cell_m,
        queries: queries.len(),
        trips_without_profile: without_profile,
        report,
    };
    let path = run.artifact(EPOA);
    write_json(&path, &prov, &summary)?;
    log::info!(
        "event=epoa queries={} upstream_calls={} included_car={} included_transit={} lower={} upper={}",
        queries.len(),
        cache.upstream_calls(),
        summary.report.included_car,
        summary.report.included_transit,
        summary.report.lower.map_or("none".into(), fmt_sig6),
        summary.report.upper.map_or("none".into(), fmt_sig6)
    );
    Ok(summary)
}

fn stage_consistency(run: &mut Run) -> Result<ConsistencySummary, PipelineError> {
    let (trips_file, trips) = load_trips(run)?;
    let cfg = &run.config.consistency;
    let three = mode_consistency_report(&trips, ModeGranularity::ThreeWay);
    let binary = mode_consistency_report(&trips, ModeGranularity::Binary);
    let modes = match cfg.mode_granularity {
        ModeGranularity::ThreeWay => &three,
        ModeGranularity::Binary => &binary,
    };
    let calibration = if cfg.calibrate {
        let paths: Vec<_> = trips
            .iter()
            .filter_map(|t| t.polyline().ok())
            .filter(|p| p.len() >= 2)
            .collect();
        let take = cfg.calibration_trips.max(1).min(paths.len());
        let step = paths.len() / take.max(1);
        let sample: Vec<_> = paths.iter().step_by(step.max(1)).take(take).cloned().collect();
        Some(calibrate_band_width(
            &sample,
            &cfg.calibration_offsets_m,
            &default_candidates(),
            DEFAULT_POSITIVE_JITTER_M,
            run.config.seed,
        )?)
    } else {
        None
    };
    let w = calibration.as_ref().map_or(cfg.w_m, |c| c.w);
    let report = route_consistency_report(&trips, modes, w, cfg.aggregation);

    let prov = run.provenance(&[&trips_file]);
    let mut body = Vec::new();
    write_user_verdicts(&mut body, &report).map_err(|e| PipelineError::Encode(e.to_string()))?;
    let path = run.artifact(CONSISTENCY_USERS);
    write_with_header(&path, &prov, &body)?;
    let mut body = Vec::new();
    write_pair_verdicts(&mut body, &report).map_err(|e| PipelineError::Encode(e.to_string()))?;
    let path = run.artifact(CONSISTENCY_PAIRS);
    write_with_header(&path, &prov, &body)?;
    let summary = ConsistencySummary {
        w_m: w,
        calibration,
        aggregation: cfg.aggregation,
        mode_three_way: (&three).into(),
        mode_binary: (&binary).into(),
        route_evaluated: report.evaluated,
        route_consistent: report.route_consistent,
        route_fraction: report.fraction,
        route_errors: report.users.iter().filter(|u| u.error.is_some()).count(),
    };
    let path = run.artifact(CONSISTENCY_SUMMARY);
    write_json(&path, &prov, &summary)?;
    log::info!(
        "event=consistency w_m={} mode_consistent={}/{} route_consistent={}/{}",
        fmt_sig6(w),
        three.consistent_total,
        three.eligible,
        report.route_consistent,
        report.evaluated
    );
    Ok(summary)
}
