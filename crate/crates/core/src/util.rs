//! Hashing and small helpers shared across modules.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::nn::Tensor;

/// Recursively sorts object keys so that the serialized form is independent
/// of field order.
pub fn canonicalize(v: &Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = serde_json::Map::new();
            for k in keys {
                out.insert(k.clone(), canonicalize(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the canonical JSON form of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    let canon = serde_json::to_string(&canonicalize(&v)).expect("json");
    sha256_hex(canon.as_bytes())[..16].to_string()
}

pub fn tensor_hash(t: &Tensor<f32>) -> String {
    let mut bytes = Vec::with_capacity(t.len() * 4 + 16);
    for d in t.shape() {
        bytes.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

/// Stable 64-bit hash (FNV-1a), used for seeded splits.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"b": 1, "a": {"y": 2, "x": [1, {"q": 0, "p": 1}]}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a": {"x": [1, {"p": 1, "q": 0}], "y": 2}, "b": 1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c: Value = serde_json::from_str(r#"{"a": 1}"#).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }
}
