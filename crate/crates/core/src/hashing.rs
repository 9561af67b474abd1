use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
///
/// Used for template versions, prompt hashes and response hashes alike, so
/// every hash in the ledger can be recomputed with standard tooling
/// (`sha256sum`).
pub fn content_hash(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}
