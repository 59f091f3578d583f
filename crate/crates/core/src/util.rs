//! Small shared helpers.

/// FNV-1a 64-bit hash; used for vocabulary digests, checkpoint checksums,
/// and stage-manifest file hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn hash_file(path: &std::path::Path) -> std::io::Result<u64> {
    Ok(fnv1a64(&std::fs::read(path)?))
}
