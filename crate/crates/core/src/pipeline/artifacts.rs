//! Artifact plumbing: provenance headers, deterministic JSON, the inverse
//! CDF plot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::stats::{fmt_sig6, sig6};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// What produced an artifact: configuration, code version and the digest of
/// every file the stage read.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub version: String,
    /// Input name to sha256.
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(config_hash: &str) -> Self {
        Provenance {
            config_hash: config_hash.to_string(),
            version: VERSION.to_string(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn with_input(mut self, name: &str, digest: &str) -> Self {
        self.inputs.insert(name.to_string(), digest.to_string());
        self
    }

    /// Single comment line heading CSV and JSON Lines artifacts.
    pub fn comment_line(&self) -> String {
        let inputs: Vec<String> = self.inputs.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        format!(
            "# config_hash={} version={} inputs={}\n",
            self.config_hash,
            self.version,
            inputs.join(",")
        )
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Drop leading `#` lines so artifacts can be fed back to the plain parsers.
pub fn strip_comments(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// An input file read for a stage, with its digest.
pub struct Loaded {
    pub name: String,
    pub text: String,
    pub digest: String,
}

pub fn load(path: &Path) -> Result<Loaded, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    let digest = sha256_hex(&bytes);
    let text = String::from_utf8(bytes).map_err(|_| PipelineError::Parse {
        path: path.to_path_buf(),
        message: "file is not UTF-8".into(),
    })?;
    Ok(Loaded {
        name: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        text: strip_comments(&text),
        digest,
    })
}

/// Write atomically: a temporary sibling, then rename.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let tmp: PathBuf = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

/// Text artifact with the provenance comment on top.
pub fn write_with_header(path: &Path, prov: &Provenance, body: &[u8]) -> Result<(), PipelineError> {
    let mut bytes = prov.comment_line().into_bytes();
    bytes.extend_from_slice(body);
    write_file(path, &bytes)
}

/// Round every non-integer number to six significant digits.
pub fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(sig6(x)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_json),
        Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Pretty JSON with a `provenance` member first and numbers rounded.
pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, body: &T) -> Result<(), PipelineError> {
    let mut value = serde_json::to_value(body).map_err(|e| PipelineError::Encode(e.to_string()))?;
    round_json(&mut value);
    let mut out = serde_json::Map::new();
    out.insert(
        "provenance".into(),
        serde_json::to_value(prov).map_err(|e| PipelineError::Encode(e.to_string()))?,
    );
    match value {
        Value::Object(m) => out.extend(m),
        other => {
            out.insert("data".into(), other);
        }
    }
    let mut text =
        serde_json::to_string_pretty(&Value::Object(out)).map_err(|e| PipelineError::Encode(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// CSV bytes from a closure writing into a `csv::Writer`.
pub fn csv_bytes(
    f: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<(), csv::Error>,
) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        f(&mut w).map_err(|e| PipelineError::Encode(e.to_string()))?;
        w.flush().map_err(|e| PipelineError::Encode(e.to_string()))?;
    }
    Ok(buf)
}

/// Step plot of `F̄(x)` against regret in minutes.
pub fn inverse_cdf_svg(points: &[(f64, f64)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let x_max = points.last().map_or(1.0, |p| p.0 / 60.0).max(1e-9);
    let sx = |x: f64| M + x / 60.0 / x_max * (W - 2.0 * M);
    let sy = |y: f64| H - M - y * (H - 2.0 * M);
    let mut path = String::new();
    let mut prev_y = 1.0;
    path.push_str(&format!("{:.2},{:.2}", sx(0.0), sy(1.0)));
    for &(x, y) in points {
        path.push_str(&format!(" {:.2},{:.2} {:.2},{:.2}", sx(x), sy(prev_y), sx(x), sy(y)));
        prev_y = y;
    }
    if let Some(&(x, _)) = points.last() {
        path.push_str(&format!(" {:.2},{:.2}", sx(x), sy(0.0)));
    }
    let mut ticks = String::new();
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        ticks.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            M + f * (W - 2.0 * M),
            H - M + 16.0,
            fmt_sig6(round2(f * x_max))
        ));
        ticks.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            M - 6.0,
            sy(f) + 4.0,
            f
        ));
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
<line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
{ticks}<text x=\"{cx}\" y=\"{lx}\" font-size=\"12\" text-anchor=\"middle\">regret (minutes)</text>\n\
<text x=\"14\" y=\"{cy}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {cy})\">fraction with regret at least x</text>\n\
<polyline fill=\"none\" stroke=\"#1f4e9c\" stroke-width=\"1.5\" points=\"{path}\"/>\n\
</svg>\n",
        b = H - M,
        r = W - M,
        cx = W / 2.0,
        lx = H - 12.0,
        cy = H / 2.0,
    )
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}
