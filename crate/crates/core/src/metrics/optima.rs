//! Optimal trip durations: the table format, providers that fill it, and the
//! cached single-flight lookup used to query them.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::LocationId;
use crate::geo::GeoPoint;
use crate::parse::ParseError;
use crate::simgame::{shortest_path, Commodity, FlowAssignment, RoadNetwork};
use crate::stats::fmt_sig6;
use crate::trace::ModeClass;

/// A provider that moves the trip origin farther than this has answered a
/// different question; the result is recorded but not used.
pub const MAX_REPOSITION_M: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Heavy,
    Light,
    Transit,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Heavy => "heavy",
            Regime::Light => "light",
            Regime::Transit => "transit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "heavy" => Some(Regime::Heavy),
            "light" => Some(Regime::Light),
            "transit" => Some(Regime::Transit),
            _ => None,
        }
    }

    /// Regimes needed for a trip of this class.
    pub fn for_mode(mode: ModeClass) -> &'static [Regime] {
        if mode.is_private() {
            &[Regime::Heavy, Regime::Light]
        } else {
            &[Regime::Transit]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimaStatus {
    Ok,
    NotFound,
    RepositionedTooFar,
    /// The provider kept failing at the transport level; distinct from a
    /// definitive "no route".
    TransientFailure,
}

impl OptimaStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimaStatus::Ok => "ok",
            OptimaStatus::NotFound => "not_found",
            OptimaStatus::RepositionedTooFar => "repositioned_too_far",
            OptimaStatus::TransientFailure => "transient_failure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(OptimaStatus::Ok),
            "not_found" => Some(OptimaStatus::NotFound),
            "repositioned_too_far" => Some(OptimaStatus::RepositionedTooFar),
            "transient_failure" => Some(OptimaStatus::TransientFailure),
            _ => None,
        }
    }
}

/// One line of the optima table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimaRow {
    pub cluster_id: LocationId,
    pub school_id: String,
    pub mode_class: ModeClass,
    pub regime: Regime,
    pub seconds: Option<f64>,
    pub status: OptimaStatus,
}

/// All regimes of one (origin cluster, school, mode) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalDuration {
    pub cluster_id: LocationId,
    pub school_id: String,
    pub mode_class: ModeClass,
    pub heavy: Option<f64>,
    pub light: Option<f64>,
    pub transit: Option<f64>,
    /// First non-ok status among the rows, else ok.
    pub status: OptimaStatus,
}

type TripleKey = (LocationId, String, ModeClass);

/// Optima indexed by (cluster, school, binary mode class).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimaTable {
    rows: Vec<OptimaRow>,
    by_triple: BTreeMap<TripleKey, OptimalDuration>,
}

impl OptimaTable {
    pub fn from_rows(rows: Vec<OptimaRow>) -> Self {
        let mut by_triple: BTreeMap<TripleKey, OptimalDuration> = BTreeMap::new();
        for r in &rows {
            let mode = r.mode_class.to_binary();
            let entry = by_triple
                .entry((r.cluster_id.clone(), r.school_id.clone(), mode))
                .or_insert_with(|| OptimalDuration {
                    cluster_id: r.cluster_id.clone(),
                    school_id: r.school_id.clone(),
                    mode_class: mode,
                    heavy: None,
                    light: None,
                    transit: None,
                    status: OptimaStatus::Ok,
                });
            if r.status == OptimaStatus::Ok {
                let slot = match r.regime {
                    Regime::Heavy => &mut entry.heavy,
                    Regime::Light => &mut entry.light,
                    Regime::Transit => &mut entry.transit,
                };
                *slot = r.seconds;
            } else if entry.status == OptimaStatus::Ok {
                entry.status = r.status;
            }
        }
        OptimaTable { rows, by_triple }
    }

    pub fn rows(&self) -> &[OptimaRow] {
        &self.rows
    }

    pub fn get(&self, cluster: &LocationId, school: &str, mode: ModeClass) -> Option<&OptimalDuration> {
        self.by_triple
            .get(&(cluster.clone(), school.to_string(), mode.to_binary()))
    }

    pub fn row(&self, cluster: &LocationId, school: &str, mode: ModeClass, regime: Regime) -> Option<&OptimaRow> {
        let mode = mode.to_binary();
        self.rows.iter().find(|r| {
            r.cluster_id == *cluster && r.school_id == school && r.mode_class.to_binary() == mode && r.regime == regime
        })
    }
}

const HEADER: [&str; 6] = ["cluster_id", "school_id", "mode_class", "regime", "seconds", "status"];

/// CSV `cluster_id,school_id,mode_class,regime,seconds,status`. Lines
/// starting with `#` are comments. `seconds` may be empty unless the status
/// is `ok`.
pub fn parse_optima_table(text: &str) -> Result<OptimaTable, ParseError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| ParseError::new(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(ParseError::new(1, format!("expected header {}", HEADER.join(","))));
    }
    let mut rows: Vec<OptimaRow> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| ParseError::new(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != HEADER.len() {
            return Err(ParseError::new(line, "expected 6 fields"));
        }
        let mode_class = ModeClass::parse(&rec[2])
            .ok_or_else(|| ParseError::new(line, format!("unknown mode class {:?}", &rec[2])))?;
        let regime =
            Regime::parse(&rec[3]).ok_or_else(|| ParseError::new(line, format!("unknown regime {:?}", &rec[3])))?;
        let status = OptimaStatus::parse(&rec[5])
            .ok_or_else(|| ParseError::new(line, format!("unknown status {:?}", &rec[5])))?;
        let seconds = if rec[4].is_empty() {
            None
        } else {
            let v = crate::parse::parse_f64(&rec[4], line, "seconds")?;
            if v < 0.0 {
                return Err(ParseError::new(line, "seconds must be >= 0"));
            }
            Some(v)
        };
        if status == OptimaStatus::Ok && seconds.is_none() {
            return Err(ParseError::new(line, "status ok needs seconds"));
        }
        if mode_class.is_private() == (regime == Regime::Transit) {
            return Err(ParseError::new(line, "transit regime only applies to public modes"));
        }
        let row = OptimaRow {
            cluster_id: LocationId(rec[0].to_string()),
            school_id: rec[1].to_string(),
            mode_class,
            regime,
            seconds,
            status,
        };
        let key = (
            row.cluster_id.clone(),
            row.school_id.clone(),
            mode_class.to_binary(),
            regime,
        );
        if !seen.insert(key) {
            return Err(ParseError::new(line, "duplicate row"));
        }
        rows.push(row);
    }
    let table = OptimaTable::from_rows(rows);
    for o in table.by_triple.values() {
        if let (Some(h), Some(l)) = (o.heavy, o.light) {
            if h < l {
                return Err(ParseError::new(
                    0,
                    format!(
                        "{} -> {}: heavy optimum {h} below light optimum {l}",
                        o.cluster_id, o.school_id
                    ),
                ));
            }
        }
    }
    Ok(table)
}

pub fn write_optima_table<W: Write>(w: W, rows: &[OptimaRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(HEADER)?;
    for r in rows {
        out.write_record([
            r.cluster_id.0.as_str(),
            &r.school_id,
            r.mode_class.as_str(),
            r.regime.as_str(),
            &r.seconds.map(fmt_sig6).unwrap_or_default(),
            r.status.as_str(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimaQuery {
    pub cluster_id: LocationId,
    /// Cluster centroid.
    pub origin: GeoPoint,
    pub school_id: String,
    pub destination: GeoPoint,
    pub mode: ModeClass,
    pub regime: Regime,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OptimaKey {
    cluster_id: LocationId,
    origin: (u64, u64),
    school_id: String,
    mode: ModeClass,
    regime: Regime,
}

impl OptimaQuery {
    pub fn key(&self) -> OptimaKey {
        OptimaKey {
            cluster_id: self.cluster_id.clone(),
            origin: (self.origin.lat.to_bits(), self.origin.lon.to_bits()),
            school_id: self.school_id.clone(),
            mode: self.mode.to_binary(),
            regime: self.regime,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderReply {
    Found {
        seconds: f64,
        /// Where the provider actually started the route, when it moved it.
        snapped_origin: Option<GeoPoint>,
    },
    NotFound,
    /// A stored answer, passed through as is.
    Recorded {
        seconds: Option<f64>,
        status: OptimaStatus,
    },
}

#[derive(Debug, Error)]
pub enum ProviderError {
    /// Retryable failure talking to the provider.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The provider refused the request; retrying will not help.
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait OptimaProvider: Send + Sync {
    fn query(&self, q: &OptimaQuery) -> Result<ProviderReply, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

type Slot = Arc<OnceLock<Result<OptimaRow, String>>>;

/// Lookup results keyed by query. Concurrent identical lookups share one
/// upstream call.
#[derive(Debug, Default)]
pub struct OptimaCache {
    slots: Mutex<HashMap<OptimaKey, Slot>>,
    upstream_calls: AtomicUsize,
}

impl OptimaCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Provider calls made so far, retries included.
    pub fn upstream_calls(&self) -> usize {
        self.upstream_calls.load(Ordering::SeqCst)
    }
}

/// Cached, retried provider lookup. Transport failures are retried with
/// exponential backoff and then recorded as `transient_failure`; rejections
/// are returned as errors.
pub fn lookup_optimal(
    cache: &OptimaCache,
    provider: &dyn OptimaProvider,
    query: &OptimaQuery,
    retry: &RetryPolicy,
) -> Result<OptimaRow, ProviderError> {
    let slot: Slot = {
        let mut slots = cache.slots.lock().expect("cache lock poisoned");
        slots.entry(query.key()).or_default().clone()
    };
    slot.get_or_init(|| fetch(cache, provider, query, retry))
        .clone()
        .map_err(ProviderError::Rejected)
}

fn fetch(
    cache: &OptimaCache,
    provider: &dyn OptimaProvider,
    q: &OptimaQuery,
    retry: &RetryPolicy,
) -> Result<OptimaRow, String> {
    let row = |seconds: Option<f64>, status: OptimaStatus| OptimaRow {
        cluster_id: q.cluster_id.clone(),
        school_id: q.school_id.clone(),
        mode_class: q.mode,
        regime: q.regime,
        seconds,
        status,
    };
    let attempts = retry.attempts.max(1);
    for attempt in 0..attempts {
        cache.upstream_calls.fetch_add(1, Ordering::SeqCst);
        match provider.query(q) {
            Ok(ProviderReply::Found {
                seconds,
                snapped_origin,
            }) => {
                let moved = snapped_origin.map_or(0.0, |p| p.distance_to(&q.origin));
                return Ok(if moved > MAX_REPOSITION_M {
                    row(None, OptimaStatus::RepositionedTooFar)
                } else {
                    row(Some(seconds), OptimaStatus::Ok)
                });
            }
            Ok(ProviderReply::NotFound) => return Ok(row(None, OptimaStatus::NotFound)),
            Ok(ProviderReply::Recorded { seconds, status }) => return Ok(row(seconds, status)),
            Err(ProviderError::Transport(e)) => {
                log::warn!(
                    "event=provider_retry cluster={} school={} regime={} attempt={} error={e:?}",
                    q.cluster_id,
                    q.school_id,
                    q.regime.as_str(),
                    attempt + 1
                );
                if attempt + 1 < attempts {
                    std::thread::sleep(retry.base_delay * 2u32.pow(attempt));
                }
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(row(None, OptimaStatus::TransientFailure))
}

/// Serves a loaded optima table.
#[derive(Debug, Clone)]
pub struct FileTableProvider {
    table: OptimaTable,
}

impl FileTableProvider {
    pub fn new(table: OptimaTable) -> Self {
        FileTableProvider { table }
    }
}

impl OptimaProvider for FileTableProvider {
    fn query(&self, q: &OptimaQuery) -> Result<ProviderReply, ProviderError> {
        Ok(match self.table.row(&q.cluster_id, &q.school_id, q.mode, q.regime) {
            Some(r) => ProviderReply::Recorded {
                seconds: r.seconds,
                status: r.status,
            },
            None => ProviderReply::NotFound,
        })
    }
}

/// Road optima from a solved social optimum. Origin and destination snap to
/// the nearest network nodes; the answer is the commodity's mean latency at
/// the optimum, or the shortest-path latency at optimum flows when no
/// commodity joins the two nodes. The simulator has no transit, so public
/// modes are never found. Both road regimes get the same value.
#[derive(Debug, Clone)]
pub struct SimulatorProvider {
    net: RoadNetwork,
    demands: Vec<Commodity>,
    optimum: FlowAssignment,
}

impl SimulatorProvider {
    pub fn new(net: RoadNetwork, demands: Vec<Commodity>, optimum: FlowAssignment) -> Self {
        SimulatorProvider { net, demands, optimum }
    }
}

impl OptimaProvider for SimulatorProvider {
    fn query(&self, q: &OptimaQuery) -> Result<ProviderReply, ProviderError> {
        if !q.mode.is_private() {
            return Ok(ProviderReply::NotFound);
        }
        let (Some((o, _)), Some((d, d_dist))) =
            (self.net.nearest_node(&q.origin), self.net.nearest_node(&q.destination))
        else {
            return Ok(ProviderReply::NotFound);
        };
        if d_dist > MAX_REPOSITION_M || o == d {
            return Ok(ProviderReply::NotFound);
        }
        let snapped_origin = self.net.embedding(o);
        if let Some(k) = self.demands.iter().position(|c| c.origin == o && c.destination == d) {
            if !self.optimum.paths.get(k).is_none_or(|p| p.is_empty()) {
                return Ok(ProviderReply::Found {
                    seconds: self.optimum.mean_latency(&self.net, k),
                    snapped_origin,
                });
            }
        }
        let w: Vec<f64> = self
            .net
            .edges()
            .iter()
            .zip(&self.optimum.edge_flows)
            .map(|(e, x)| e.latency.eval(*x))
            .collect();
        Ok(match shortest_path(&self.net, &w, o, d) {
            Some((_, seconds)) => ProviderReply::Found {
                seconds,
                snapped_origin,
            },
            None => ProviderReply::NotFound,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgame::{pigou_embedded, social_optimum, SolverParams};

    fn query(regime: Regime) -> OptimaQuery {
        OptimaQuery {
            cluster_id: LocationId("g0_0".into()),
            origin: GeoPoint::new(1.35, 103.8).unwrap(),
            school_id: "S1".into(),
            destination: GeoPoint::new(1.36, 103.85).unwrap(),
            mode: ModeClass::Private,
            regime,
        }
    }

    struct Flaky {
        failures: AtomicUsize,
        reply: ProviderReply,
    }

    impl OptimaProvider for Flaky {
        fn query(&self, _: &OptimaQuery) -> Result<ProviderReply, ProviderError> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(ProviderError::Transport("timeout".into()));
            }
            Ok(self.reply.clone())
        }
    }

    fn no_wait() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::ZERO,
        }
    }

    #[test]
    fn repeated_lookups_hit_cache() {
        let p = Flaky {
            failures: AtomicUsize::new(0),
            reply: ProviderReply::Found {
                seconds: 900.0,
                snapped_origin: None,
            },
        };
        let cache = OptimaCache::new();
        for _ in 0..5 {
            let r = lookup_optimal(&cache, &p, &query(Regime::Heavy), &no_wait()).unwrap();
            assert_eq!((r.seconds, r.status), (Some(900.0), OptimaStatus::Ok));
        }
        assert_eq!(cache.upstream_calls(), 1);
    }

    #[test]
    fn concurrent_lookups_single_flight() {
        let p = Flaky {
            failures: AtomicUsize::new(0),
            reply: ProviderReply::NotFound,
        };
        let cache = OptimaCache::new();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| lookup_optimal(&cache, &p, &query(Regime::Light), &no_wait()).unwrap());
            }
        });
        assert_eq!(cache.upstream_calls(), 1);
    }

    #[test]
    fn retries_then_transient_failure() {
        let p = Flaky {
            failures: AtomicUsize::new(2),
            reply: ProviderReply::NotFound,
        };
        let cache = OptimaCache::new();
        let r = lookup_optimal(&cache, &p, &query(Regime::Heavy), &no_wait()).unwrap();
        assert_eq!(r.status, OptimaStatus::NotFound);
        assert_eq!(cache.upstream_calls(), 3);

        let p = Flaky {
            failures: AtomicUsize::new(10),
            reply: ProviderReply::NotFound,
        };
        let cache = OptimaCache::new();
        let r = lookup_optimal(&cache, &p, &query(Regime::Heavy), &no_wait()).unwrap();
        assert_eq!(r.status, OptimaStatus::TransientFailure);
        assert_eq!(cache.upstream_calls(), 3);
    }

    #[test]
    fn far_reposition_is_flagged() {
        let q = query(Regime::Heavy);
        let p = Flaky {
            failures: AtomicUsize::new(0),
            reply: ProviderReply::Found {
                seconds: 900.0,
                snapped_origin: Some(crate::geo::offset_point(&q.origin, 1500.0, 0.0)),
            },
        };
        let r = lookup_optimal(&OptimaCache::new(), &p, &q, &no_wait()).unwrap();
        assert_eq!(r.status, OptimaStatus::RepositionedTooFar);
    }

    const TABLE: &str = "# provenance x\ncluster_id,school_id,mode_class,regime,seconds,status\ng0_0,S1,car,heavy,1000,ok\ng0_0,S1,car,light,800,ok\ng0_0,S1,bus,transit,,not_found\n";

    #[test]
    fn table_round_trip_and_passthrough() {
        let t = parse_optima_table(TABLE).unwrap();
        let o = t.get(&LocationId("g0_0".into()), "S1", ModeClass::Private).unwrap();
        assert_eq!(
            (o.heavy, o.light, o.status),
            (Some(1000.0), Some(800.0), OptimaStatus::Ok)
        );
        let o = t.get(&LocationId("g0_0".into()), "S1", ModeClass::Metro).unwrap();
        assert_eq!(o.status, OptimaStatus::NotFound);

        let mut buf = Vec::new();
        write_optima_table(&mut buf, t.rows()).unwrap();
        let again = parse_optima_table(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(again.rows(), t.rows());

        let p = FileTableProvider::new(t);
        let mut q = query(Regime::Light);
        q.cluster_id = LocationId("g0_0".into());
        let r = lookup_optimal(&OptimaCache::new(), &p, &q, &no_wait()).unwrap();
        assert_eq!(r.seconds, Some(800.0));
    }

    #[test]
    fn table_rejects_bad_rows() {
        let bad = |body: &str| {
            parse_optima_table(&format!(
                "cluster_id,school_id,mode_class,regime,seconds,status\n{body}"
            ))
            .is_err()
        };
        assert!(bad("g,S,car,heavy,,ok\n"));
        assert!(bad("g,S,car,transit,5,ok\n"));
        assert!(bad("g,S,plane,heavy,5,ok\n"));
        assert!(bad("g,S,car,heavy,-5,ok\n"));
        assert!(bad("g,S,car,heavy,5,ok\ng,S,private,heavy,6,ok\n"));
        assert!(bad("g,S,car,heavy,5,ok\ng,S,car,light,6,ok\n"));
        assert!(parse_optima_table("a,b\n").is_err());
    }

    #[test]
    fn simulator_provider_on_pigou() {
        let (net, dem) = pigou_embedded(1800.0);
        let opt = social_optimum(&net, &dem, &SolverParams::default()).unwrap();
        let origin = net.embedding(0).unwrap();
        let school = net.embedding(3).unwrap();
        let p = SimulatorProvider::new(net, dem, opt);
        let mut q = query(Regime::Light);
        q.origin = crate::geo::offset_point(&origin, 50.0, 0.0);
        q.destination = school;
        let r = lookup_optimal(&OptimaCache::new(), &p, &q, &no_wait()).unwrap();
        assert_eq!(r.status, OptimaStatus::Ok);
        assert!((r.seconds.unwrap() - 1350.0).abs() < 1e-3);
        q.mode = ModeClass::Public;
        q.regime = Regime::Transit;
        let r = lookup_optimal(&OptimaCache::new(), &p, &q, &no_wait()).unwrap();
        assert_eq!(r.status, OptimaStatus::NotFound);
    }
}
