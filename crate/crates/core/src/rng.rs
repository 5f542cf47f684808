//! Seed derivation.
//!
//! Every random stream in the simulator is a ChaCha8 generator whose seed is
//! derived from a master seed and a path of integer (or hashed string) tags.
//! Streams therefore never depend on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of the splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `master`, one splitmix round per tag.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// FNV-1a over the key bytes; stable across platforms and runs.
pub fn key_hash(key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn derived_stream(master: u64, parts: &[u64]) -> SimRng {
    stream(derive_seed(master, parts))
}

/// Uniform in [0, 1) from the top 53 bits of a 64-bit word.
pub fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

// Stream tags. Distinct constants keep unrelated streams apart even when
// they share a master seed.
pub const TAG_CORPUS: u64 = 1;
pub const TAG_NOISE: u64 = 2;
pub const TAG_PARTITION: u64 = 3;
pub const TAG_LABELS: u64 = 4;
pub const TAG_INIT: u64 = 5;
pub const TAG_ROUND: u64 = 6;
pub const TAG_CLIENT: u64 = 7;
pub const TAG_SPLIT: u64 = 8;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_depends_on_every_part() {
        let a = derive_seed(7, &[1, 2, 3]);
        assert_eq!(a, derive_seed(7, &[1, 2, 3]));
        assert_ne!(a, derive_seed(7, &[1, 2, 4]));
        assert_ne!(a, derive_seed(8, &[1, 2, 3]));
        assert_ne!(a, derive_seed(7, &[2, 1, 3]));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(key_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(key_hash("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn unit_interval() {
        assert_eq!(unit_f64(0), 0.0);
        assert!(unit_f64(u64::MAX) < 1.0);
    }
}
