//! Seed derivation and keyed random streams.
//!
//! Every random stream in the lab is a ChaCha8 generator whose 32-byte key
//! is the SHA-256 digest of `(seed, label, ids...)`. Streams therefore depend
//! only on their key, never on scheduling or worker count.
//!
//! Stage seeds follow the same rule: `derive_seed(master, stage, salt)` is the
//! first 8 bytes (little-endian) of
//! `SHA-256("scribblediff/seed" || master_le || stage || 0x00 || salt_le)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type LabRng = ChaCha8Rng;

/// Per-stage seed as a pure function of the master seed and stage name.
pub fn derive_seed(master: u64, stage: &str, salt: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"scribblediff/seed");
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    h.update([0u8]);
    h.update(salt.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Random stream keyed by `(seed, label, ids)`.
pub fn keyed_rng(seed: u64, label: &str, ids: &[u64]) -> LabRng {
    let mut h = Sha256::new();
    h.update(b"scribblediff/stream");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0u8]);
    for id in ids {
        h.update(id.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Stable 64-bit encoding of an encode ratio for use as a stream id.
pub fn lambda_key(lambda: f64) -> u64 {
    lambda.to_bits()
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}
