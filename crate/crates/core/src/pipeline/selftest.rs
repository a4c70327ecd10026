//! Self-validation against the congestion-game simulator.
//!
//! Pigou and Braess instances are solved for their equilibrium and optimum
//! flows, turned into noisy traces, and pushed through the whole pipeline
//! with the simulator's optimum as the optima provider. Recovered numbers are
//! checked against the analytic ones.
//!
//! Layout under the output directory:
//!
//! ```text
//! <instance>/network.net
//! <instance>/<variant>/{config.toml,samples.jsonl,schools.csv,ground_truth.csv,out/}
//! sensitivity.csv
//! selftest.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::artifacts::{csv_bytes, load, write_file, write_json};
use super::{
    parsed, run_pipeline, PipelineConfig, PipelineError, Provenance, ProviderKind, RegretSummary, Stage, PROFILES,
    SCHOOL_MERGE_RADIUS_M, TRIPS,
};
use crate::cluster::{build_clusters, ClusterMethod};
use crate::metrics::{compute_regret, epsilon_delta, regret_distribution, RegretRecord};
use crate::simgame::{
    braess_embedded, pigou_embedded, social_optimum, synthesize_traces, wardrop_equilibrium, write_ground_truth,
    write_network, Commodity, Detour, FlowAssignment, RoadNetwork, SolverParams, SynthParams,
};
use crate::stats::{fmt_sig6, nearest_rank};
use crate::trace::io::{parse_profiles, parse_school_catalog, parse_trips, write_samples, write_school_catalog};
use crate::trace::{SchoolCatalog, SegmentParams};

/// Relative tolerance on recovered EPoA.
pub const EPOA_TOLERANCE: f64 = 0.03;
/// Two sampling periods.
pub const NULL_MEDIAN_S: f64 = 26.0;
pub const NULL_P95_S: f64 = 60.0;
pub const DETOUR_TOLERANCE_S: f64 = 26.0;
pub const SHORTCUT_SHARE: f64 = 0.99;
pub const PIGOU_RUNTIME_LIMIT: Duration = Duration::from_secs(60);
/// Braess shortcut edge in [`braess_embedded`].
const BRAESS_SHORTCUT_EDGE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestParams {
    pub seed: u64,
    pub n_users: usize,
    pub days: usize,
    pub noise_sigma_m: f64,
    pub detour_fraction: f64,
    pub detour_s: f64,
    /// Clustering radii of the sensitivity sweep.
    pub r_values: Vec<f64>,
}

impl Default for SelftestParams {
    fn default() -> Self {
        SelftestParams {
            seed: 1,
            n_users: 200,
            days: 2,
            noise_sigma_m: 15.0,
            detour_fraction: 0.2,
            detour_s: 300.0,
            r_values: vec![200.0, 400.0, 600.0, 800.0, 1000.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantResult {
    pub users: usize,
    pub trips: usize,
    pub epoa_lower: Option<f64>,
    pub epoa_upper: Option<f64>,
    pub regret: RegretSummary,
    /// Median over all regret records, zeros included.
    pub regret_median_all_s: f64,
    pub mode_consistent_fraction: Option<f64>,
    pub route_consistent_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceResult {
    pub name: String,
    pub equilibrium_cost: f64,
    pub optimum_cost: f64,
    pub analytic_poa: f64,
    pub equilibrium: VariantResult,
    pub optimum: VariantResult,
    pub detour: Option<VariantResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub instance: String,
    pub method: ClusterMethod,
    pub r_m: f64,
    pub clusters: usize,
    pub singleton_clusters: usize,
    pub mean_regret_s: f64,
    pub median_regret_s: f64,
    pub epsilon_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub params: SelftestParams,
    pub instances: Vec<InstanceResult>,
    pub sensitivity: Vec<SensitivityRow>,
    pub criteria: Vec<CriterionResult>,
    /// Wall-clock time of the Pigou equilibrium run; kept out of artifacts.
    #[serde(skip)]
    pub pigou_runtime: Duration,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&CriterionResult> {
        self.criteria.iter().filter(|c| !c.passed).collect()
    }

    pub fn criterion(&self, id: &str) -> Option<&CriterionResult> {
        self.criteria.iter().find(|c| c.id == id)
    }
}

fn within(x: Option<f64>, target: f64, rel: f64) -> bool {
    x.is_some_and(|x| (x - target).abs() <= rel * target)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("none".into(), fmt_sig6)
}

fn encode<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Encode(e.to_string())
}

struct Variant<'a> {
    name: &'a str,
    flows: &'a FlowAssignment,
    detour: Option<Detour>,
    stages: &'a [Stage],
}

#[derive(Clone)]
struct VariantRun {
    result: VariantResult,
    records: Vec<RegretRecord>,
    path_ids: BTreeMap<String, String>,
    detour_users: BTreeSet<String>,
}

/// Configuration for simulated traces: wider smoothing for the 15 m noise,
/// no tail cleaning, and the simulator as optima provider.
pub fn synthetic_config(seed: u64, network: &str) -> PipelineConfig {
    // Synthetic traces have no outliers; trimming duration tails would
    // remove exactly the injected detours.
    let mut c = PipelineConfig {
        seed,
        clean: false,
        segment: SegmentParams {
            smooth_window: 9,
            ..SegmentParams::default()
        },
        ..PipelineConfig::default()
    };
    c.provider.kind = ProviderKind::Simulator;
    c.provider.network = Some(network.into());
    c
}

fn run_variant(
    dir: &Path,
    net: &RoadNetwork,
    params: &SelftestParams,
    v: &Variant,
) -> Result<VariantRun, PipelineError> {
    let vdir = dir.join(v.name);
    let synth = SynthParams {
        n_users: params.n_users,
        days: params.days,
        noise_sigma_m: params.noise_sigma_m,
        seed: params.seed,
        detour: v.detour,
        ..SynthParams::default()
    };
    let out = synthesize_traces(net, v.flows, &synth)?;
    let mut buf = Vec::new();
    write_samples(&mut buf, &out.samples).map_err(encode)?;
    write_file(&vdir.join("samples.jsonl"), &buf)?;
    let mut buf = Vec::new();
    write_school_catalog(&mut buf, &out.schools).map_err(encode)?;
    write_file(&vdir.join("schools.csv"), &buf)?;
    let mut buf = Vec::new();
    write_ground_truth(&mut buf, &out.truth).map_err(encode)?;
    write_file(&vdir.join("ground_truth.csv"), &buf)?;
    let config = PipelineConfig {
        utc_offset_s: synth.utc_offset_s,
        ..synthetic_config(params.seed, "../network.net")
    };
    write_file(&vdir.join("config.toml"), config.to_toml().as_bytes())?;

    let outcome = run_pipeline(&config, &vdir, v.stages)?;
    let (records, _, regret) = outcome.regret.expect("regret stage requested");
    let mut all: Vec<f64> = records.iter().map(|r| r.regret_s).collect();
    all.sort_by(f64::total_cmp);
    let regret_median_all_s = if all.is_empty() { 0.0 } else { nearest_rank(&all, 50.0) };
    let segment = outcome.segment.expect("segment stage requested");
    let result = VariantResult {
        users: segment.users,
        trips: segment.trips,
        epoa_lower: outcome.epoa.as_ref().and_then(|e| e.report.lower),
        epoa_upper: outcome.epoa.as_ref().and_then(|e| e.report.upper),
        regret,
        regret_median_all_s,
        mode_consistent_fraction: outcome
            .consistency
            .as_ref()
            .map(|c| c.mode_three_way.consistent_fraction),
        route_consistent_fraction: outcome.consistency.as_ref().map(|c| c.route_fraction),
    };
    let path_ids = out
        .truth
        .iter()
        .map(|t| (t.user.0.clone(), t.path_id.clone()))
        .collect();
    let detour_users = out
        .truth
        .iter()
        .filter(|t| t.detour_s > 0.0)
        .map(|t| t.user.0.clone())
        .collect();
    Ok(VariantRun {
        result,
        records,
        path_ids,
        detour_users,
    })
}

fn sensitivity(
    instance: &str,
    vdir: &Path,
    config: &PipelineConfig,
    r_values: &[f64],
) -> Result<Vec<SensitivityRow>, PipelineError> {
    let out = vdir.join(&config.inputs.output_dir);
    let trips_file = load(&out.join(TRIPS))?;
    let trips = parsed(&out.join(TRIPS), parse_trips(&trips_file.text))?;
    let profiles_file = load(&out.join(PROFILES))?;
    let profiles = parsed(&out.join(PROFILES), parse_profiles(&profiles_file.text))?;
    let profiles = profiles.into_iter().map(|p| (p.user.clone(), p)).collect();
    let schools_path = vdir.join(&config.inputs.schools);
    let schools = parsed(&schools_path, parse_school_catalog(&load(&schools_path)?.text))?;
    let catalog = SchoolCatalog::new(schools, SCHOOL_MERGE_RADIUS_M);
    let mut rows = Vec::new();
    for method in [ClusterMethod::Grid, ClusterMethod::DistanceRule] {
        for &r in r_values {
            let mut params = config.cluster_params();
            params.method = method;
            params.r_m = r;
            let set = build_clusters(&trips, &profiles, Some(&catalog), &params)?;
            let records: Vec<RegretRecord> = set.clusters.iter().flat_map(|c| compute_regret(c, &trips)).collect();
            let dist = regret_distribution(&records, config.regret.trim_percentile);
            rows.push(SensitivityRow {
                instance: instance.to_string(),
                method,
                r_m: r,
                clusters: set.clusters.len(),
                singleton_clusters: set.clusters.iter().filter(|c| c.members.len() == 1).count(),
                mean_regret_s: dist.mean_s,
                median_regret_s: dist.median_s,
                epsilon_s: epsilon_delta(&dist, config.regret.delta),
            });
        }
    }
    Ok(rows)
}

fn solve_both(net: &RoadNetwork, demands: &[Commodity]) -> Result<(FlowAssignment, FlowAssignment), PipelineError> {
    let p = SolverParams::default();
    Ok((
        wardrop_equilibrium(net, demands, &p)?,
        social_optimum(net, demands, &p)?,
    ))
}

const ALL_STAGES: [Stage; 5] = Stage::ALL;
const REGRET_STAGES: [Stage; 3] = [Stage::Segment, Stage::Cluster, Stage::Regret];

/// Keyed by (user, day).
fn by_user_day(records: &[RegretRecord]) -> BTreeMap<(String, i64), f64> {
    records
        .iter()
        .map(|r| ((r.user.0.clone(), r.cluster.day), r.regret_s))
        .collect()
}

/// Build, run and judge every instance. Criteria failures are reported, not
/// returned as errors; errors mean the run itself could not complete.
pub fn run_selftest(params: &SelftestParams, out_dir: &Path) -> Result<SelftestReport, PipelineError> {
    let mut instances = Vec::new();
    let mut criteria = Vec::new();
    let mut sens = Vec::new();
    let mut pigou_runtime = Duration::ZERO;
    let mut shortcut_share = 0.0;
    let mut detour_runs: Option<(VariantRun, VariantRun)> = None;

    for name in ["pigou", "braess"] {
        let started = Instant::now();
        let (net, demands) = if name == "pigou" {
            pigou_embedded(1800.0)
        } else {
            braess_embedded(900.0)
        };
        let dir = out_dir.join(name);
        write_file(&dir.join("network.net"), write_network(&net, &demands).as_bytes())?;
        let (eq, so) = solve_both(&net, &demands)?;
        log::info!(
            "event=selftest_instance instance={name} equilibrium_cost={} optimum_cost={}",
            fmt_sig6(eq.total_cost),
            fmt_sig6(so.total_cost)
        );
        let eq_run = run_variant(
            &dir,
            &net,
            params,
            &Variant {
                name: "equilibrium",
                flows: &eq,
                detour: None,
                stages: &ALL_STAGES,
            },
        )?;
        if name == "pigou" {
            pigou_runtime = started.elapsed();
        }
        let so_run = run_variant(
            &dir,
            &net,
            params,
            &Variant {
                name: "optimum",
                flows: &so,
                detour: None,
                stages: &ALL_STAGES,
            },
        )?;
        let detour = if name == "pigou" {
            let run = run_variant(
                &dir,
                &net,
                params,
                &Variant {
                    name: "detour",
                    flows: &eq,
                    detour: Some(Detour {
                        fraction: params.detour_fraction,
                        delay_s: params.detour_s,
                    }),
                    stages: &REGRET_STAGES,
                },
            )?;
            let result = run.result.clone();
            detour_runs = Some((eq_run.clone(), run));
            Some(result)
        } else {
            let on_shortcut = eq_run
                .path_ids
                .values()
                .filter(|id| path_edges(&eq, id).is_some_and(|e| e.contains(&BRAESS_SHORTCUT_EDGE)))
                .count();
            shortcut_share = on_shortcut as f64 / eq_run.path_ids.len().max(1) as f64;
            None
        };
        sens.extend(sensitivity(
            name,
            &dir.join("equilibrium"),
            &synthetic_config(params.seed, "../network.net"),
            &params.r_values,
        )?);
        instances.push(InstanceResult {
            name: name.to_string(),
            equilibrium_cost: eq.total_cost,
            optimum_cost: so.total_cost,
            analytic_poa: eq.total_cost / so.total_cost,
            equilibrium: eq_run.result,
            optimum: so_run.result,
            detour,
        });
    }

    let pigou = &instances[0];
    let braess = &instances[1];
    let target = 4.0 / 3.0;
    for (id, inst) in [("1", pigou), ("2", braess)] {
        let eq = &inst.equilibrium;
        let mut passed = within(eq.epoa_lower, target, EPOA_TOLERANCE) && within(eq.epoa_upper, target, EPOA_TOLERANCE);
        let mut detail = format!(
            "recovered EPoA lower={} upper={} target={} analytic={}",
            fmt_opt(eq.epoa_lower),
            fmt_opt(eq.epoa_upper),
            fmt_sig6(target),
            fmt_sig6(inst.analytic_poa)
        );
        if id == "2" {
            passed &= shortcut_share >= SHORTCUT_SHARE;
            detail.push_str(&format!(" shortcut_share={}", fmt_sig6(shortcut_share)));
        }
        criteria.push(CriterionResult {
            id: id.into(),
            name: format!("{} end-to-end EPoA", inst.name),
            passed,
            detail,
        });
    }
    for inst in [pigou, braess] {
        let r = &inst.equilibrium.regret;
        criteria.push(CriterionResult {
            id: format!("3-{}", inst.name),
            name: format!("{} equilibrium regret null", inst.name),
            passed: r.median_s <= NULL_MEDIAN_S && r.p95_s <= NULL_P95_S,
            detail: format!(
                "positive-regret median_s={} p95_s={} (all-records median_s={}) limits {NULL_MEDIAN_S}/{NULL_P95_S}",
                fmt_sig6(r.median_s),
                fmt_sig6(r.p95_s),
                fmt_sig6(inst.equilibrium.regret_median_all_s)
            ),
        });
    }
    let (base, detour) = detour_runs.expect("pigou detour run");
    criteria.push(detour_criterion(params, &base, &detour));
    for inst in [pigou, braess] {
        let o = &inst.optimum;
        criteria.push(CriterionResult {
            id: format!("optimum-{}", inst.name),
            name: format!("{} optimum self-comparison", inst.name),
            passed: within(o.epoa_lower, 1.0, EPOA_TOLERANCE) && within(o.epoa_upper, 1.0, EPOA_TOLERANCE),
            detail: format!("EPoA lower={} upper={}", fmt_opt(o.epoa_lower), fmt_opt(o.epoa_upper)),
        });
    }

    let mut report = SelftestReport {
        params: params.clone(),
        instances,
        sensitivity: sens,
        criteria,
        pigou_runtime,
    };
    write_sensitivity(out_dir, &report)?;
    let prov = Provenance::new(&super::sha256_hex(&serde_json::to_vec(params).map_err(encode)?));
    write_json(&out_dir.join("selftest.json"), &prov, &report)?;
    report.criteria.push(CriterionResult {
        id: "1-runtime".into(),
        name: "pigou end-to-end runtime".into(),
        passed: pigou_runtime < PIGOU_RUNTIME_LIMIT,
        detail: format!(
            "{:.1} s (limit {} s)",
            pigou_runtime.as_secs_f64(),
            PIGOU_RUNTIME_LIMIT.as_secs()
        ),
    });
    for c in &report.criteria {
        log::info!(
            "event=criterion id={} passed={} detail=\"{}\"",
            c.id,
            c.passed,
            c.detail
        );
    }
    Ok(report)
}

fn path_edges<'a>(flows: &'a FlowAssignment, path_id: &str) -> Option<&'a [usize]> {
    let rest = path_id.strip_prefix('c')?;
    let (k, j) = rest.split_once('p')?;
    let p = flows
        .paths
        .get(k.parse::<usize>().ok()?)?
        .get(j.parse::<usize>().ok()?)?;
    Some(&p.edges)
}

/// Detour users must show the injected delay as regret; everybody else must
/// keep the regret they had without any detour, trip for trip.
fn detour_criterion(params: &SelftestParams, base: &VariantRun, detour: &VariantRun) -> CriterionResult {
    let before = by_user_day(&base.records);
    let after = by_user_day(&detour.records);
    let delayed = &detour.detour_users;
    let mut worst_detour: f64 = 0.0;
    let mut worst_other: f64 = 0.0;
    let mut worst_other_literal: f64 = 0.0;
    let mut missing = 0usize;
    let mut n_detour = 0usize;
    for (key, &r) in &after {
        if delayed.contains(&key.0) {
            n_detour += 1;
            worst_detour = worst_detour.max((r - params.detour_s).abs());
        } else {
            worst_other_literal = worst_other_literal.max(r.abs());
            match before.get(key) {
                Some(&b) => worst_other = worst_other.max((r - b).abs()),
                None => missing += 1,
            }
        }
    }
    let expected = (params.detour_fraction * params.n_users as f64).round() as usize * params.days;
    CriterionResult {
        id: "4".into(),
        name: "regret detection of injected detours".into(),
        passed: worst_detour <= DETOUR_TOLERANCE_S
            && worst_other <= DETOUR_TOLERANCE_S
            && missing == 0
            && n_detour == expected,
        detail: format!(
            "detour trips={n_detour}/{expected} max|regret-{}|={} others max|change|={} (max regret {}) unmatched={missing}",
            params.detour_s,
            fmt_sig6(worst_detour),
            fmt_sig6(worst_other),
            fmt_sig6(worst_other_literal)
        ),
    }
}

fn write_sensitivity(out_dir: &Path, report: &SelftestReport) -> Result<(), PipelineError> {
    let body = csv_bytes(|w| {
        w.write_record([
            "instance",
            "method",
            "r_m",
            "clusters",
            "singleton_clusters",
            "mean_regret_s",
            "median_regret_s",
            "epsilon_s",
        ])?;
        for r in &report.sensitivity {
            w.write_record([
                r.instance.as_str(),
                r.method.as_str(),
                &fmt_sig6(r.r_m),
                &r.clusters.to_string(),
                &r.singleton_clusters.to_string(),
                &fmt_sig6(r.mean_regret_s),
                &fmt_sig6(r.median_regret_s),
                &fmt_sig6(r.epsilon_s),
            ])?;
        }
        Ok(())
    })?;
    write_file(&out_dir.join("sensitivity.csv"), &body)
}
