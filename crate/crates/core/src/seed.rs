//! Seed derivation.
//!
//! A master seed fans out to named component seeds as the first eight bytes
//! (little-endian) of `SHA-256(master_le || label)`. Component labels are
//! stable strings such as `"sft/add"` or `"rl/stage-1"`, so adding a new
//! component never shifts the seeds of existing ones. Within a component,
//! indexed sub-streams (one per problem, per step, ...) use [`child_seed`].

use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Seed of the `index`-th sub-stream of `parent`.
pub fn child_seed(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
