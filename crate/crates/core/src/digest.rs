//! Content digests for artifact headers.
//!
//! Artifacts record a digest of their inputs (corpus files, schema, config)
//! so that runs can be traced back to the exact data they saw. FNV-1a is
//! enough for provenance tagging; this is not a cryptographic check.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Digest of a list of named items, independent of the order they are given.
pub fn digest_named<'a, I: IntoIterator<Item = (&'a str, &'a [u8])>>(items: I) -> u64 {
    let mut entries: Vec<(u64, u64)> = items
        .into_iter()
        .map(|(name, bytes)| (fnv1a(name.as_bytes()), fnv1a(bytes)))
        .collect();
    entries.sort_unstable();
    let mut h = FNV_OFFSET;
    for (n, b) in entries {
        for byte in n.to_le_bytes().into_iter().chain(b.to_le_bytes()) {
            h ^= byte as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

pub fn hex(d: u64) -> String {
    format!("{d:016x}")
}
