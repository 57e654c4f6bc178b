//! Atomic file output with provenance.

use std::path::{Path, PathBuf};

use ohd_core::corpus::write_atomic;
use ohd_core::report::Provenance;
use ohd_core::{Result, GENERATOR_VERSION};
use serde::Serialize;
use serde_json::{json, Value};

pub fn provenance(seed: u64, config_hash: &str) -> Provenance {
    Provenance {
        seed,
        version: GENERATOR_VERSION.to_owned(),
        config_hash: config_hash.to_owned(),
    }
}

/// `body` (an object) with a `provenance` key, pretty-printed.
pub fn write_json(path: &Path, prov: &Provenance, body: Value) -> Result<()> {
    let mut doc = json!({ "provenance": prov });
    if let (Some(dst), Value::Object(src)) = (doc.as_object_mut(), body) {
        dst.extend(src);
    }
    let mut bytes = serde_json::to_vec_pretty(&doc).expect("json values serialize");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// JSONL with a provenance header line.
pub fn write_jsonl<T: Serialize>(path: &Path, prov: &Provenance, rows: &[T]) -> Result<()> {
    let mut bytes = serde_json::to_vec(&json!({ "provenance": prov })).expect("json values serialize");
    bytes.push(b'\n');
    for row in rows {
        serde_json::to_writer(&mut bytes, row).expect("rows serialize");
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

/// Where provenance goes for formats that cannot carry it.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_sidecar(path: &Path, prov: &Provenance, kind: &str) -> Result<()> {
    write_json(&sidecar(path), prov, json!({ "kind": kind }))
}

/// `path` with `suffix` appended to the file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
