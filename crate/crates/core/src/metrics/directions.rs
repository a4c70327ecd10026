//! Client for a Google-Directions-style web service.
//!
//! Road optima are collected at fixed departure times: the heavy regime is the
//! larger of two weekday-peak answers, the light regime a Sunday-morning
//! answer. Transit is queried once; the service ignores traffic for it.
//! Responses are cached on disk keyed by the request without the API key, so
//! reruns make no network calls.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::Value;
use sha2::{Digest, Sha256};

use super::optima::{OptimaProvider, OptimaQuery, ProviderError, ProviderReply, Regime};
use crate::geo::GeoPoint;
use crate::parse::ParseError;
use crate::trace::{LocalClock, Timestamp};

pub const API_KEY_VAR: &str = "DIRECTIONS_API_KEY";
pub const DEFAULT_ENDPOINT: &str = "https://maps.googleapis.com/maps/api/directions/json";

pub trait HttpTransport: Send + Sync {
    /// Body of a successful response. Server errors and timeouts map to
    /// `Transport`, client errors to `Rejected`.
    fn get(&self, url: &str) -> Result<String, ProviderError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(ReqwestTransport { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn get(&self, url: &str) -> Result<String, ProviderError> {
        let resp = self
            .client
            .get(url)
            .send()
            .map_err(|e| ProviderError::Transport(e.without_url().to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(ProviderError::Transport(format!("http {status}")));
        }
        if !status.is_success() {
            return Err(ProviderError::Rejected(format!("http {status}")));
        }
        resp.text()
            .map_err(|e| ProviderError::Transport(e.without_url().to_string()))
    }
}

/// What one directions response says.
#[derive(Debug, Clone, PartialEq)]
pub enum DirectionsOutcome {
    Route {
        /// Summed over legs, in-traffic durations preferred.
        seconds: f64,
        /// Where the service started the route.
        start: Option<GeoPoint>,
    },
    NotFound,
    /// Quota or server-side hiccup; worth retrying.
    Retry(String),
    Denied(String),
}

pub fn parse_directions_response(body: &str) -> Result<DirectionsOutcome, ParseError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ParseError::new(e.line(), e.to_string()))?;
    let status = v
        .get("status")
        .and_then(Value::as_str)
        .ok_or_else(|| ParseError::new(0, "missing status"))?;
    let message = || {
        v.get("error_message")
            .and_then(Value::as_str)
            .unwrap_or(status)
            .to_string()
    };
    match status {
        "OK" => {}
        "ZERO_RESULTS" | "NOT_FOUND" => return Ok(DirectionsOutcome::NotFound),
        "OVER_QUERY_LIMIT" | "UNKNOWN_ERROR" => return Ok(DirectionsOutcome::Retry(message())),
        _ => return Ok(DirectionsOutcome::Denied(message())),
    }
    let legs = v
        .pointer("/routes/0/legs")
        .and_then(Value::as_array)
        .filter(|l| !l.is_empty())
        .ok_or_else(|| ParseError::new(0, "status OK without route legs"))?;
    let mut seconds = 0.0;
    for leg in legs {
        let d = leg
            .pointer("/duration_in_traffic/value")
            .or_else(|| leg.pointer("/duration/value"))
            .and_then(Value::as_f64)
            .ok_or_else(|| ParseError::new(0, "leg without duration"))?;
        if !(d.is_finite() && d >= 0.0) {
            return Err(ParseError::new(0, "leg duration must be a non-negative number"));
        }
        seconds += d;
    }
    let start = match legs[0].get("start_location") {
        None => None,
        Some(s) => {
            let lat = s.get("lat").and_then(Value::as_f64);
            let lng = s.get("lng").and_then(Value::as_f64);
            match (lat, lng) {
                (Some(lat), Some(lng)) => {
                    Some(GeoPoint::new(lat, lng).map_err(|e| ParseError::new(0, format!("start_location: {e}")))?)
                }
                _ => return Err(ParseError::new(0, "start_location needs lat and lng")),
            }
        }
    };
    Ok(DirectionsOutcome::Route { seconds, start })
}

/// Departure instants used per regime.
#[derive(Debug, Clone, PartialEq)]
pub struct DepartureSchedule {
    /// Heavy regime takes the maximum over these.
    pub heavy: Vec<Timestamp>,
    pub light: Timestamp,
    pub transit: Timestamp,
}

impl DepartureSchedule {
    /// Tuesday 07:00 and 08:00 (heavy and transit at 07:00) and Sunday
    /// 07:00 (light), the first such days strictly after `now`.
    pub fn next_after(now: Timestamp, clock: LocalClock) -> Self {
        let today = clock.day(now);
        let next = |weekday: i64| {
            // weekday(): Monday = 0.
            let wd = clock.weekday(clock.at(today, 0));
            let ahead = (weekday - wd).rem_euclid(7);
            today + if ahead == 0 { 7 } else { ahead }
        };
        let tue = next(1);
        let sun = next(6);
        DepartureSchedule {
            heavy: vec![clock.at(tue, 7 * 3600), clock.at(tue, 8 * 3600)],
            light: clock.at(sun, 7 * 3600),
            transit: clock.at(tue, 7 * 3600),
        }
    }
}

struct Throttle {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl Throttle {
    fn new(rps: f64) -> Self {
        let interval = if rps > 0.0 && rps.is_finite() {
            Duration::from_secs_f64(1.0 / rps)
        } else {
            Duration::ZERO
        };
        Throttle {
            interval,
            next: Mutex::new(None),
        }
    }

    fn wait(&self) {
        let wait = {
            let mut next = self.next.lock().expect("throttle lock poisoned");
            let now = Instant::now();
            let slot = next.map_or(now, |t| t.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

pub struct DirectionsProvider {
    transport: Box<dyn HttpTransport>,
    endpoint: String,
    api_key: String,
    cache_dir: Option<PathBuf>,
    throttle: Throttle,
    schedule: DepartureSchedule,
}

impl DirectionsProvider {
    pub fn new(
        transport: Box<dyn HttpTransport>,
        api_key: String,
        schedule: DepartureSchedule,
        requests_per_second: f64,
        cache_dir: Option<PathBuf>,
    ) -> Self {
        DirectionsProvider {
            transport,
            endpoint: DEFAULT_ENDPOINT.to_string(),
            api_key,
            cache_dir,
            throttle: Throttle::new(requests_per_second),
            schedule,
        }
    }

    /// Key from `DIRECTIONS_API_KEY`.
    pub fn api_key_from_env() -> Result<String, ProviderError> {
        match std::env::var(API_KEY_VAR) {
            Ok(k) if !k.trim().is_empty() => Ok(k),
            _ => Err(ProviderError::MissingCredential(API_KEY_VAR.to_string())),
        }
    }

    pub fn with_endpoint(mut self, endpoint: impl Into<String>) -> Self {
        self.endpoint = endpoint.into();
        self
    }

    fn params(origin: &GeoPoint, dest: &GeoPoint, mode: &str, departure: Timestamp) -> Vec<(&'static str, String)> {
        vec![
            ("departure_time", departure.to_string()),
            ("destination", format!("{:.7},{:.7}", dest.lat, dest.lon)),
            ("mode", mode.to_string()),
            ("origin", format!("{:.7},{:.7}", origin.lat, origin.lon)),
        ]
    }

    /// Canonical request text, key excluded; also the cache key.
    pub fn canonical_request(origin: &GeoPoint, dest: &GeoPoint, mode: &str, departure: Timestamp) -> String {
        Self::params(origin, dest, mode, departure)
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("&")
    }

    fn fetch(
        &self,
        origin: &GeoPoint,
        dest: &GeoPoint,
        mode: &str,
        departure: Timestamp,
    ) -> Result<DirectionsOutcome, ProviderError> {
        let canonical = Self::canonical_request(origin, dest, mode, departure);
        let cache_file = self
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("{}.json", hex::encode(Sha256::digest(canonical.as_bytes())))));
        if let Some(path) = &cache_file {
            if let Ok(body) = std::fs::read_to_string(path) {
                if let Ok(outcome) = parse_directions_response(&body) {
                    return Ok(outcome);
                }
            }
        }
        let mut url =
            reqwest::Url::parse(&self.endpoint).map_err(|e| ProviderError::Rejected(format!("endpoint: {e}")))?;
        {
            let mut q = url.query_pairs_mut();
            for (k, v) in Self::params(origin, dest, mode, departure) {
                q.append_pair(k, &v);
            }
            q.append_pair("key", &self.api_key);
        }
        self.throttle.wait();
        let body = self.transport.get(url.as_str())?;
        let outcome = parse_directions_response(&body)?;
        if let (Some(path), DirectionsOutcome::Route { .. } | DirectionsOutcome::NotFound) = (&cache_file, &outcome) {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let tmp = path.with_extension("tmp");
            std::fs::write(&tmp, &body)?;
            std::fs::rename(&tmp, path)?;
        }
        Ok(outcome)
    }
}

impl OptimaProvider for DirectionsProvider {
    fn query(&self, q: &OptimaQuery) -> Result<ProviderReply, ProviderError> {
        let (mode, departures) = match q.regime {
            Regime::Heavy => ("driving", self.schedule.heavy.clone()),
            Regime::Light => ("driving", vec![self.schedule.light]),
            Regime::Transit => ("transit", vec![self.schedule.transit]),
        };
        if q.mode.is_private() == (q.regime == Regime::Transit) {
            return Err(ProviderError::Rejected(format!(
                "regime {} does not apply to mode {}",
                q.regime.as_str(),
                q.mode
            )));
        }
        // Heavy: the maximum over departures; a farther snap wins so that a
        // bad reposition in any answer is seen.
        let mut best: Option<(f64, Option<GeoPoint>)> = None;
        for t in departures {
            match self.fetch(&q.origin, &q.destination, mode, t)? {
                DirectionsOutcome::Route { seconds, start } => {
                    let (s, st) = best.get_or_insert((seconds, start));
                    *s = s.max(seconds);
                    let moved = |p: &Option<GeoPoint>| p.map_or(0.0, |p| p.distance_to(&q.origin));
                    if moved(&start) > moved(st) {
                        *st = start;
                    }
                }
                DirectionsOutcome::NotFound => return Ok(ProviderReply::NotFound),
                DirectionsOutcome::Retry(m) => return Err(ProviderError::Transport(m)),
                DirectionsOutcome::Denied(m) => return Err(ProviderError::Rejected(m)),
            }
        }
        Ok(match best {
            Some((seconds, snapped_origin)) => ProviderReply::Found {
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
    use crate::cluster::LocationId;
    use crate::trace::ModeClass;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn ok_body(seconds: f64, lat: f64, lng: f64) -> String {
        format!(
            r#"{{"status":"OK","routes":[{{"legs":[{{"duration":{{"value":{}}},"duration_in_traffic":{{"value":{seconds}}},"start_location":{{"lat":{lat},"lng":{lng}}}}}]}}]}}"#,
            seconds - 100.0
        )
    }

    #[test]
    fn parses_statuses() {
        assert_eq!(
            parse_directions_response(&ok_body(900.0, 1.35, 103.8)).unwrap(),
            DirectionsOutcome::Route {
                seconds: 900.0,
                start: Some(GeoPoint::new(1.35, 103.8).unwrap())
            }
        );
        let no_traffic =
            r#"{"status":"OK","routes":[{"legs":[{"duration":{"value":300}},{"duration":{"value":200}}]}]}"#;
        assert_eq!(
            parse_directions_response(no_traffic).unwrap(),
            DirectionsOutcome::Route {
                seconds: 500.0,
                start: None
            }
        );
        assert_eq!(
            parse_directions_response(r#"{"status":"ZERO_RESULTS","routes":[]}"#).unwrap(),
            DirectionsOutcome::NotFound
        );
        assert!(matches!(
            parse_directions_response(r#"{"status":"OVER_QUERY_LIMIT"}"#).unwrap(),
            DirectionsOutcome::Retry(_)
        ));
        assert!(matches!(
            parse_directions_response(r#"{"status":"REQUEST_DENIED","error_message":"bad key"}"#).unwrap(),
            DirectionsOutcome::Denied(m) if m == "bad key"
        ));
        assert!(parse_directions_response(r#"{"status":"OK","routes":[]}"#).is_err());
        assert!(parse_directions_response("not json").is_err());
    }

    struct Canned {
        calls: Arc<AtomicUsize>,
        urls: Arc<Mutex<Vec<String>>>,
    }

    impl HttpTransport for Canned {
        fn get(&self, url: &str) -> Result<String, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.urls.lock().unwrap().push(url.to_string());
            // Later departures are slower.
            let t: f64 = url
                .split("departure_time=")
                .nth(1)
                .and_then(|s| s.split('&').next())
                .and_then(|s| s.parse().ok())
                .unwrap();
            Ok(ok_body(600.0 + (t % 10_000.0) / 10.0, 1.35, 103.8))
        }
    }

    fn provider(dir: Option<PathBuf>) -> (DirectionsProvider, Arc<AtomicUsize>, Arc<Mutex<Vec<String>>>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let urls = Arc::new(Mutex::new(Vec::new()));
        let t = Canned {
            calls: calls.clone(),
            urls: urls.clone(),
        };
        let schedule = DepartureSchedule {
            heavy: vec![1000, 4600],
            light: 0,
            transit: 1000,
        };
        (
            DirectionsProvider::new(Box::new(t), "secret".into(), schedule, 0.0, dir),
            calls,
            urls,
        )
    }

    fn query(regime: Regime, mode: ModeClass) -> OptimaQuery {
        OptimaQuery {
            cluster_id: LocationId("g1_1".into()),
            origin: GeoPoint::new(1.35, 103.8).unwrap(),
            school_id: "S".into(),
            destination: GeoPoint::new(1.4, 103.85).unwrap(),
            mode,
            regime,
        }
    }

    #[test]
    fn heavy_is_max_of_peak_queries() {
        let (p, calls, urls) = provider(None);
        let r = p.query(&query(Regime::Heavy, ModeClass::Car)).unwrap();
        assert!(matches!(r, ProviderReply::Found { seconds, .. } if seconds == 600.0 + 460.0));
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert!(urls
            .lock()
            .unwrap()
            .iter()
            .all(|u| u.contains("mode=driving") && u.contains("key=secret")));
        let r = p.query(&query(Regime::Transit, ModeClass::Bus)).unwrap();
        assert!(matches!(r, ProviderReply::Found { seconds, .. } if seconds == 700.0));
        assert!(p.query(&query(Regime::Transit, ModeClass::Car)).is_err());
    }

    #[test]
    fn disk_cache_avoids_network() {
        let dir = tempfile::tempdir().unwrap();
        let (p, calls, _) = provider(Some(dir.path().to_path_buf()));
        let a = p.query(&query(Regime::Light, ModeClass::Car)).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        let (p2, calls2, _) = provider(Some(dir.path().to_path_buf()));
        let b = p2.query(&query(Regime::Light, ModeClass::Car)).unwrap();
        assert_eq!(a, b);
        assert_eq!(calls2.load(Ordering::SeqCst), 0);
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
        assert!(!std::fs::read_to_string(dir.path().join(&names[0]))
            .unwrap()
            .contains("secret"));
    }

    #[test]
    fn canonical_request_omits_key() {
        let o = GeoPoint::new(1.0, 103.0).unwrap();
        let c = DirectionsProvider::canonical_request(&o, &o, "driving", 5);
        assert_eq!(
            c,
            "departure_time=5&destination=1.0000000,103.0000000&mode=driving&origin=1.0000000,103.0000000"
        );
    }

    #[test]
    fn throttle_spaces_requests() {
        let t = Throttle::new(50.0);
        let start = Instant::now();
        for _ in 0..4 {
            t.wait();
        }
        assert!(start.elapsed() >= Duration::from_millis(55));
    }

    #[test]
    fn schedule_picks_tuesday_and_sunday() {
        let clock = LocalClock::new(8 * 3600);
        // 2016-03-07 is a Monday.
        let monday_noon = clock.at(16867, 12 * 3600);
        let s = DepartureSchedule::next_after(monday_noon, clock);
        assert_eq!(s.heavy, vec![clock.at(16868, 7 * 3600), clock.at(16868, 8 * 3600)]);
        assert_eq!(s.light, clock.at(16873, 7 * 3600));
        assert_eq!(s.transit, s.heavy[0]);
    }
}
