//! Reading and writing fractal-code documents.
//!
//! The on-disk format is versioned JSON:
//!
//! ```json
//! {
//!   "version": 1,
//!   "m": 3,
//!   "maps": [
//!     { "u_raw": [...4], "v_raw": [...4], "s_raw": [...2], "b_raw": [...2] }
//!   ],
//!   "meta": { "seed": 42, "iterations": 15000 }
//! }
//! ```
//!
//! Matrix entries are row-major `[m00, m01, m10, m11]`. Floats are written
//! with shortest-round-trip decimal printing, so encode → decode reproduces
//! every scalar bit-exactly. `meta` is optional and open-ended: unknown
//! keys inside it survive a round trip. The declared `m` is cross-checked
//! against the length of `maps` on read.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ifs::{FractalCode, RawAffineParams};

/// Version this build writes and the only one it accepts.
pub const FORMAT_VERSION: u32 = 1;

/// Optional provenance block carried alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DocumentMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    /// Anything else a writer wants to record; preserved verbatim.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl DocumentMeta {
    pub fn is_empty(&self) -> bool {
        self.seed.is_none() && self.iterations.is_none() && self.extra.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct MapRecord {
    u_raw: [f64; 4],
    v_raw: [f64; 4],
    s_raw: [f64; 2],
    b_raw: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct CodeDocument {
    version: u32,
    m: usize,
    maps: Vec<MapRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<DocumentMeta>,
}

/// Serializes a code (plus optional metadata) to document text.
pub fn encode_code(code: &FractalCode, meta: Option<&DocumentMeta>) -> Result<String> {
    if code.maps.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot encode a fractal code with zero maps".into(),
        ));
    }
    if !code.is_finite() {
        return Err(Error::InvalidArgument(
            "cannot encode non-finite raw parameters".into(),
        ));
    }
    let doc = CodeDocument {
        version: FORMAT_VERSION,
        m: code.maps.len(),
        maps: code
            .maps
            .iter()
            .map(|m| MapRecord {
                u_raw: m.u_raw,
                v_raw: m.v_raw,
                s_raw: m.s_raw,
                b_raw: m.b_raw,
            })
            .collect(),
        meta: meta.filter(|m| !m.is_empty()).cloned(),
    };
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::CodeSchema(format!("serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Parses document text into a code and its metadata.
pub fn decode_code(text: &str) -> Result<(FractalCode, Option<DocumentMeta>)> {
    let doc: CodeDocument = serde_json::from_str(text).map_err(|e| Error::CodeDocument {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if doc.version != FORMAT_VERSION {
        return Err(Error::CodeVersion {
            found: doc.version,
            supported: FORMAT_VERSION,
        });
    }
    if doc.m != doc.maps.len() {
        return Err(Error::CodeSchema(format!(
            "field 'm' declares {} maps but 'maps' holds {}",
            doc.m,
            doc.maps.len()
        )));
    }
    if doc.maps.is_empty() {
        return Err(Error::CodeSchema("field 'maps' must not be empty".into()));
    }
    let maps: Vec<RawAffineParams> = doc
        .maps
        .iter()
        .map(|r| RawAffineParams {
            u_raw: r.u_raw,
            v_raw: r.v_raw,
            s_raw: r.s_raw,
            b_raw: r.b_raw,
        })
        .collect();
    for (i, m) in maps.iter().enumerate() {
        if !m.is_finite() {
            return Err(Error::CodeSchema(format!(
                "field 'maps[{i}]' contains a non-finite value"
            )));
        }
    }
    Ok((FractalCode { maps }, doc.meta))
}

/// Writes a code document to a file.
pub fn write_code_file(
    path: impl AsRef<Path>,
    code: &FractalCode,
    meta: Option<&DocumentMeta>,
) -> Result<()> {
    std::fs::write(path, encode_code(code, meta)?)?;
    Ok(())
}

/// Reads a code document from a file.
pub fn read_code_file(path: impl AsRef<Path>) -> Result<(FractalCode, Option<DocumentMeta>)> {
    decode_code(&std::fs::read_to_string(path)?)
}
