//! Keyed deterministic random streams.
//!
//! Every random draw in the crate comes from a stream identified by a master
//! seed, a purpose label and a list of indices (pair id, trial id, ...). The
//! key is hashed with SplitMix64 into a 256-bit ChaCha8 seed, so streams are
//! independent of evaluation order and of the number of worker threads.
//!
//! Dense operator entries use the stateless [`counter_uniform`] and
//! [`counter_normal`] functions keyed by `(seed, row, col)`, which lets a
//! matrix be regenerated entry by entry without ever being stored.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Folds `(seed, label, indices)` into a single 64-bit key.
pub fn derive_key(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(label_hash(label)));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(GOLDEN)));
    }
    h
}

/// A ChaCha8 stream for the given key.
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut k = derive_key(seed, label, indices);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        k = splitmix64(k);
        chunk.copy_from_slice(&k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

#[inline]
fn to_unit(bits: u64) -> f64 {
    // 53 random mantissa bits, in [0, 1)
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform value in `[0, 1)` determined by `(key, a, b)`.
#[inline]
pub fn counter_uniform(key: u64, a: u64, b: u64) -> f64 {
    to_unit(splitmix64(key ^ splitmix64(a ^ splitmix64(b.wrapping_add(GOLDEN)))))
}

/// Standard normal value determined by `(key, a, b)` (Box-Muller, cosine branch).
#[inline]
pub fn counter_normal(key: u64, a: u64, b: u64) -> f64 {
    let h = splitmix64(key ^ splitmix64(a ^ splitmix64(b.wrapping_add(GOLDEN))));
    let u1 = 1.0 - to_unit(h); // (0, 1]
    let u2 = to_unit(splitmix64(h));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Random sign `±1` determined by `(key, a, b)`.
#[inline]
pub fn counter_sign(key: u64, a: u64, b: u64) -> f64 {
    if splitmix64(key ^ splitmix64(a ^ splitmix64(b.wrapping_add(GOLDEN)))) >> 63 == 0 {
        1.0
    } else {
        -1.0
    }
}
