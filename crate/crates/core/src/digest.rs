//! Content hashes embedded in solution files and outputs.

use serde::Serialize;
use sha2::{Digest as _, Sha256};

pub type Digest = [u8; 32];

/// SHA-256 of the compact JSON encoding.
pub fn hash_json<T: Serialize>(value: &T) -> Digest {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hash_bytes(&bytes)
}

pub fn hash_bytes(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

/// Hash of the concatenated parts.
pub fn combine(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub fn to_hex(d: &Digest) -> String {
    hex::encode(d)
}

pub fn from_hex(s: &str) -> Option<Digest> {
    let v = hex::decode(s).ok()?;
    v.try_into().ok()
}
