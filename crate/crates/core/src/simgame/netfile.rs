//! Text formats for congestion-game instances.
//!
//! Native edge list, one record per line, `#` starts a comment:
//!
//! ```text
//! nodes 3
//! node 0 1.35 103.80          # optional embedding: id lat lon
//! edge 0 1 1200 0 1 0 0 0     # from to length_m a0 [a1 .. a4]
//! demand 0 2 1.5              # origin destination amount
//! ```
//!
//! The benchmark format (`*_net.tntp`, `*_trips.tntp`) uses 1-based node
//! ids and BPR link costs `t0 (1 + B (x / cap)^p)`, converted here to the
//! polynomial `t0 + t0 B / cap^p x^p` for integer `p <= 4`. The
//! first-through-node restriction of that format is not modelled.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{Commodity, Edge, Latency, RoadNetwork, SimError, MAX_DEGREE};
use crate::geo::GeoPoint;
use crate::parse::{parse_f64, parse_usize, ParseError};

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

pub fn parse_network(text: &str) -> Result<(RoadNetwork, Vec<Commodity>), SimError> {
    let mut n: Option<usize> = None;
    let mut edges = Vec::new();
    let mut demands = Vec::new();
    let mut embeddings: BTreeMap<usize, GeoPoint> = BTreeMap::new();
    let need_nodes =
        |n: Option<usize>, line: usize| n.ok_or_else(|| ParseError::new(line, "`nodes` header must come first"));
    let node_id = |tok: &str, n: usize, line: usize, what: &str| -> Result<usize, ParseError> {
        let id = parse_usize(tok, line, what)?;
        if id >= n {
            return Err(ParseError::new(line, format!("{what} {id} outside 0..{n}")));
        }
        Ok(id)
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks: Vec<&str> = strip_comment(raw).split_whitespace().collect();
        let Some(&kind) = toks.first() else { continue };
        match kind {
            "nodes" => {
                if n.is_some() {
                    return Err(ParseError::new(line, "duplicate `nodes` header").into());
                }
                if toks.len() != 2 {
                    return Err(ParseError::new(line, "expected `nodes <count>`").into());
                }
                let count = parse_usize(toks[1], line, "node count")?;
                if count < 2 {
                    return Err(ParseError::new(line, "need at least 2 nodes").into());
                }
                n = Some(count);
            }
            "node" => {
                let n = need_nodes(n, line)?;
                if toks.len() != 4 {
                    return Err(ParseError::new(line, "expected `node <id> <lat> <lon>`").into());
                }
                let id = node_id(toks[1], n, line, "node")?;
                let p = GeoPoint::new(parse_f64(toks[2], line, "lat")?, parse_f64(toks[3], line, "lon")?)
                    .map_err(|e| ParseError::new(line, e.to_string()))?;
                if embeddings.insert(id, p).is_some() {
                    return Err(ParseError::new(line, format!("node {id} embedded twice")).into());
                }
            }
            "edge" => {
                let n = need_nodes(n, line)?;
                if toks.len() < 5 || toks.len() > 5 + MAX_DEGREE {
                    return Err(ParseError::new(line, "expected `edge <from> <to> <length> <a0> [.. a4]`").into());
                }
                let from = node_id(toks[1], n, line, "edge origin")?;
                let to = node_id(toks[2], n, line, "edge destination")?;
                let length_m = parse_f64(toks[3], line, "length")?;
                let mut coeffs = [0.0; MAX_DEGREE + 1];
                for (k, tok) in toks[4..].iter().enumerate() {
                    coeffs[k] = parse_f64(tok, line, "coefficient")?;
                }
                edges.push((
                    line,
                    Edge {
                        from,
                        to,
                        length_m,
                        latency: Latency(coeffs),
                    },
                ));
            }
            "demand" => {
                let n = need_nodes(n, line)?;
                if toks.len() != 4 {
                    return Err(ParseError::new(line, "expected `demand <origin> <dest> <amount>`").into());
                }
                demands.push(Commodity {
                    origin: node_id(toks[1], n, line, "demand origin")?,
                    destination: node_id(toks[2], n, line, "demand destination")?,
                    demand: parse_f64(toks[3], line, "amount")?,
                });
            }
            other => {
                return Err(ParseError::new(line, format!("unknown record `{other}`")).into());
            }
        }
    }
    let n = n.ok_or_else(|| ParseError::new(0, "missing `nodes` header"))?;
    let mut net = RoadNetwork::new(n, edges.into_iter().map(|(_, e)| e).collect())?;
    for (id, p) in embeddings {
        net.set_embedding(id, p)?;
    }
    net.validate_commodities(&demands)?;
    Ok((net, demands))
}

/// Inverse of [`parse_network`]; numbers use the shortest round-trip form.
pub fn write_network(net: &RoadNetwork, demands: &[Commodity]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "nodes {}", net.node_count());
    for i in 0..net.node_count() {
        if let Some(p) = net.embedding(i) {
            let _ = writeln!(s, "node {i} {} {}", p.lat, p.lon);
        }
    }
    for e in net.edges() {
        let _ = write!(s, "edge {} {} {}", e.from, e.to, e.length_m);
        for a in e.latency.0 {
            let _ = write!(s, " {a}");
        }
        s.push('\n');
    }
    for c in demands {
        let _ = writeln!(s, "demand {} {} {}", c.origin, c.destination, c.demand);
    }
    s
}

fn tntp_metadata(text: &str) -> (BTreeMap<String, String>, usize) {
    let mut meta = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with("<END OF METADATA>") {
            return (meta, i + 1);
        }
        if let Some(rest) = line.strip_prefix('<') {
            if let Some((key, value)) = rest.split_once('>') {
                meta.insert(key.trim().to_ascii_uppercase(), value.trim().to_string());
            }
        }
    }
    (meta, 0)
}

fn meta_usize(meta: &BTreeMap<String, String>, key: &str) -> Result<usize, ParseError> {
    let v = meta
        .get(key)
        .ok_or_else(|| ParseError::new(0, format!("missing <{key}>")))?;
    parse_usize(v, 0, key)
}

/// Benchmark link table. Lengths are multiplied by `length_to_m`.
pub fn parse_tntp_net(text: &str, length_to_m: f64) -> Result<RoadNetwork, SimError> {
    let (meta, body_start) = tntp_metadata(text);
    let n = meta_usize(&meta, "NUMBER OF NODES")?;
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate().skip(body_start) {
        let line = i + 1;
        let body = raw.split('~').next().unwrap_or("").trim();
        let body = body.trim_end_matches(';').trim();
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.len() < 7 {
            return Err(ParseError::new(line, "link row needs at least 7 columns").into());
        }
        let from = parse_usize(toks[0], line, "init node")?;
        let to = parse_usize(toks[1], line, "term node")?;
        if from == 0 || to == 0 || from > n || to > n {
            return Err(ParseError::new(line, format!("node id outside 1..={n}")).into());
        }
        let capacity = parse_f64(toks[2], line, "capacity")?;
        let length = parse_f64(toks[3], line, "length")?;
        let t0 = parse_f64(toks[4], line, "free flow time")?;
        let b = parse_f64(toks[5], line, "B")?;
        let power = parse_f64(toks[6], line, "power")?;
        if power.fract() != 0.0 || !(0.0..=MAX_DEGREE as f64).contains(&power) {
            return Err(ParseError::new(line, format!("BPR power {power} is not an integer in 0..=4")).into());
        }
        let mut coeffs = [0.0; MAX_DEGREE + 1];
        coeffs[0] = t0;
        if b != 0.0 {
            if !(capacity > 0.0) {
                return Err(ParseError::new(line, "capacity must be > 0").into());
            }
            coeffs[power as usize] += t0 * b / capacity.powi(power as i32);
        }
        edges.push(Edge {
            from: from - 1,
            to: to - 1,
            length_m: length * length_to_m,
            latency: Latency(coeffs),
        });
    }
    if let Ok(m) = meta_usize(&meta, "NUMBER OF LINKS") {
        if m != edges.len() {
            return Err(ParseError::new(0, format!("declared {m} links, found {}", edges.len())).into());
        }
    }
    RoadNetwork::new(n, edges)
}

/// Benchmark origin-destination table; zero and diagonal entries are skipped.
pub fn parse_tntp_trips(text: &str) -> Result<Vec<Commodity>, SimError> {
    let (meta, body_start) = tntp_metadata(text);
    let zones = meta_usize(&meta, "NUMBER OF ZONES")?;
    let mut origin: Option<usize> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate().skip(body_start) {
        let line = i + 1;
        let body = raw.split('~').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix("Origin") {
            let o = parse_usize(rest.trim(), line, "origin")?;
            if o == 0 || o > zones {
                return Err(ParseError::new(line, format!("origin outside 1..={zones}")).into());
            }
            origin = Some(o);
            continue;
        }
        let o = origin.ok_or_else(|| ParseError::new(line, "entries before any `Origin`"))?;
        for entry in body.split(';') {
            let entry = entry.trim();
            if entry.is_empty() {
                continue;
            }
            let (d, v) = entry
                .split_once(':')
                .ok_or_else(|| ParseError::new(line, format!("expected `dest : flow`, got {entry:?}")))?;
            let d = parse_usize(d.trim(), line, "destination")?;
            if d == 0 || d > zones {
                return Err(ParseError::new(line, format!("destination outside 1..={zones}")).into());
            }
            let v = parse_f64(v.trim(), line, "flow")?;
            if v < 0.0 {
                return Err(ParseError::new(line, "negative flow").into());
            }
            if v > 0.0 && d != o {
                out.push(Commodity {
                    origin: o - 1,
                    destination: d - 1,
                    demand: v,
                });
            }
        }
    }
    Ok(out)
}
