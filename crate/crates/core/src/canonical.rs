//! Canonical JSON encoding and digests.
//!
//! Canonical form: object keys sorted, no insignificant whitespace. Achieved
//! by round-tripping through `serde_json::Value`, whose map is ordered.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serialize to canonical JSON bytes (sorted keys, compact).
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let v = serde_json::to_value(value)?;
    serde_json::to_vec(&v)
}

/// Hex SHA-256 of the canonical JSON encoding.
pub fn digest<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let bytes = to_canonical_json(value)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
