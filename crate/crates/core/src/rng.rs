//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is derived from the run seed plus a
//! structural key (purpose tag, chapter, frame index, epoch, ...) so that
//! reruns are bit-identical and parallel consumers never share a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; stable across platforms and releases.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of words into one seed. Order-sensitive.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x6a09_e667_f3bc_c909u64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// FNV-1a over the bytes of a string; used to key streams by chapter id.
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A ChaCha stream keyed by the given words.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Purpose tags keeping unrelated streams apart.
pub mod tag {
    pub const INIT: u64 = 0x01;
    pub const SHUFFLE: u64 = 0x02;
    pub const AUGMENT: u64 = 0x03;
    pub const DROPOUT: u64 = 0x04;
    pub const SYNTH: u64 = 0x05;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn mix_is_order_sensitive() {
        assert_ne!(mix(&[1, 2]), mix(&[2, 1]));
        assert_eq!(mix(&[1, 2]), mix(&[1, 2]));
    }

    #[test]
    fn stream_is_reproducible() {
        let mut a = stream(&[42, tag::AUGMENT, 7]);
        let mut b = stream(&[42, tag::AUGMENT, 7]);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn hash_str_differs_by_content() {
        assert_ne!(hash_str("chapter_a"), hash_str("chapter_b"));
    }
}
