//! Short content digests used to tie artifacts (checkpoints, splits, reports) together.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn of_bytes(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

pub fn of_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("digest input serializes");
    of_bytes(&bytes)
}
