//! Versioned binary container: a text header, a JSON manifest, then raw
//! little-endian `f64` payload.
//!
//! ```text
//! KARN-CONTAINER 1\n
//! <manifest byte length>\n
//! <manifest JSON>
//! <payload: 8 bytes per value, little endian>
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &str = "KARN-CONTAINER";
pub const CONTAINER_VERSION: u32 = 1;

/// One named block of the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
    pub len: usize,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub trainable: bool,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Envelope<M> {
    kind: String,
    payload_values: usize,
    payload_sha256: String,
    tensors: Vec<TensorEntry>,
    body: M,
}

/// Collects named tensors into one payload.
#[derive(Debug, Clone, Default)]
pub struct PayloadWriter {
    entries: Vec<TensorEntry>,
    values: Vec<f64>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.push_flagged(name, shape, data, true);
    }

    pub fn push_flagged(&mut self, name: &str, shape: &[usize], data: &[f64], trainable: bool) {
        self.entries.push(TensorEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.values.len(),
            len: data.len(),
            trainable,
        });
        self.values.extend_from_slice(data);
    }

    /// Indices stored losslessly as `f64` (exact below 2^53).
    pub fn push_indices(&mut self, name: &str, data: &[usize]) {
        let v: Vec<f64> = data.iter().map(|&i| i as f64).collect();
        self.push(name, &[data.len()], &v);
    }
}

/// Parsed container with tensor lookup by name.
#[derive(Debug, Clone)]
pub struct Payload {
    origin: String,
    entries: Vec<TensorEntry>,
    values: Vec<f64>,
}

impl Payload {
    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::format(&self.origin, format!("missing tensor `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let e = self.entry(name)?;
        Ok(&self.values[e.offset..e.offset + e.len])
    }

    pub fn indices(&self, name: &str) -> Result<Vec<usize>> {
        self.get(name)?
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 9.007_199_254_740_992e15 {
                    Ok(v as usize)
                } else {
                    Err(Error::format(&self.origin, format!("tensor `{name}` holds non-index value {v}")))
                }
            })
            .collect()
    }
}

pub fn encode<M: Serialize>(kind: &str, body: &M, payload: &PayloadWriter) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(payload.values.len() * 8);
    for v in &payload.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let env = Envelope {
        kind: kind.into(),
        payload_values: payload.values.len(),
        payload_sha256: hex::encode(Sha256::digest(&bytes)),
        tensors: payload.entries.clone(),
        body,
    };
    let manifest = serde_json::to_vec_pretty(&env).map_err(|e| Error::Data(format!("manifest encoding: {e}")))?;
    let mut out = format!("{MAGIC} {CONTAINER_VERSION}\n{}\n", manifest.len()).into_bytes();
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&bytes);
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n')?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).ok()
}

/// Decode a container of the given kind. `origin` names it in errors.
pub fn decode<M: DeserializeOwned>(bytes: &[u8], kind: &str, origin: &Path) -> Result<(M, Payload)> {
    let bad = |m: String| Error::format(origin, m);
    let mut pos = 0;
    let header = take_line(bytes, &mut pos).ok_or_else(|| bad("not a container (no header line)".into()))?;
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| bad(format!("not a container (header `{}`)", header.chars().take(40).collect::<String>())))?;
    if version != CONTAINER_VERSION.to_string() {
        return Err(bad(format!("unsupported container version {version} (this build reads {CONTAINER_VERSION})")));
    }
    let mlen: usize = take_line(bytes, &mut pos)
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| bad("bad manifest length".into()))?;
    if bytes.len() < pos + mlen {
        return Err(bad("truncated manifest".into()));
    }
    let env: Envelope<M> =
        serde_json::from_slice(&bytes[pos..pos + mlen]).map_err(|e| bad(format!("manifest: {e}")))?;
    if env.kind != kind {
        return Err(bad(format!("expected a {kind} container, found {}", env.kind)));
    }
    pos += mlen;
    let raw = &bytes[pos..];
    if raw.len() != env.payload_values * 8 {
        return Err(bad(format!(
            "payload holds {} bytes, manifest declares {} values",
            raw.len(),
            env.payload_values
        )));
    }
    if hex::encode(Sha256::digest(raw)) != env.payload_sha256 {
        return Err(bad("payload checksum mismatch".into()));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    for e in &env.tensors {
        let count: usize = e.shape.iter().product();
        if count != e.len || e.offset + e.len > values.len() {
            return Err(bad(format!("tensor `{}` has inconsistent shape or extent", e.name)));
        }
    }
    Ok((
        env.body,
        Payload {
            origin: origin.display().to_string(),
            entries: env.tensors,
            values,
        },
    ))
}

pub fn write_file<M: Serialize>(path: &Path, kind: &str, body: &M, payload: &PayloadWriter) -> Result<()> {
    let bytes = encode(kind, body, payload)?;
    crate::fsutil::write_atomic(path, &bytes)
}

pub fn read_file<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(M, Payload)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, kind, path)
}
