//! Portable, seedable pseudo-random streams.
//!
//! Every sampling decision in a run draws from a [`Stream`], a xoshiro256**
//! generator whose state is expanded from a 64-bit seed with SplitMix64.
//! Both generators are fully specified below so the sequences can be
//! reproduced in any language:
//!
//! ```text
//! splitmix64(x):
//!     x  = x + 0x9E3779B97F4A7C15            (wrapping)
//!     z  = x
//!     z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!     z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!     return (x, z ^ (z >> 31))
//!
//! xoshiro256** next():
//!     result = rotl(s1 * 5, 7) * 9
//!     t  = s1 << 17
//!     s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
//!     s2 ^= t;  s3 = rotl(s3, 45)
//!     return result
//! ```
//!
//! Independent purposes get independent streams through
//! [`Stream::for_purpose`]: the purpose tag is hashed with 64-bit FNV-1a, xored
//! into the master seed and passed once through SplitMix64.

use alloc::vec::Vec;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// One SplitMix64 step. Returns the advanced state and the output.
pub fn splitmix64(state: u64) -> (u64, u64) {
    let x = state.wrapping_add(GOLDEN);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (x, z ^ (z >> 31))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Seed for the stream identified by `purpose` under `master`.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    splitmix64(master ^ fnv1a64(purpose.as_bytes())).1
}

/// xoshiro256** stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    s: [u64; 4],
}

impl Stream {
    pub fn from_seed(seed: u64) -> Self {
        let mut st = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            let (next, out) = splitmix64(st);
            st = next;
            *slot = out;
        }
        Stream { s }
    }

    pub fn for_purpose(master: u64, purpose: &str) -> Self {
        Self::from_seed(derive_seed(master, purpose))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection: draws `x` until
    /// `x < u64::MAX - (u64::MAX % n)` and returns `x % n`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Fisher-Yates shuffle walking from the last index down:
    /// for `i` in `n-1..=1`, swap `i` with `below(i + 1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Uniform sample of `min(m, items.len())` elements without replacement,
    /// in draw order (partial Fisher-Yates from the front: for `i` in `0..m`,
    /// swap `i` with `i + below(n - i)`).
    pub fn sample<T: Clone>(&mut self, items: &[T], m: usize) -> Vec<T> {
        let mut pool: Vec<T> = items.to_vec();
        let n = pool.len();
        let m = m.min(n);
        for i in 0..m {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(m);
        pool
    }

    /// Bernoulli draw.
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_vector() {
        // First outputs of SplitMix64 seeded with 0 (published reference values).
        let (s1, a) = splitmix64(0);
        let (_, b) = splitmix64(s1);
        assert_eq!(a, 0xE220_A839_7B1D_CDAF);
        assert_eq!(b, 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn streams_are_reproducible_and_purpose_separated() {
        let mut a = Stream::for_purpose(7, "sample");
        let mut b = Stream::for_purpose(7, "sample");
        let mut c = Stream::for_purpose(7, "shuffle");
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn below_stays_in_range() {
        let mut s = Stream::from_seed(1);
        for n in 1..50u64 {
            for _ in 0..20 {
                assert!(s.below(n) < n);
            }
        }
    }

    #[test]
    fn sample_is_a_subset_without_repeats() {
        let items: Vec<u32> = (0..10).collect();
        let mut s = Stream::from_seed(3);
        let mut got = s.sample(&items, 4);
        assert_eq!(got.len(), 4);
        got.sort();
        got.dedup();
        assert_eq!(got.len(), 4);
        assert_eq!(Stream::from_seed(3).sample(&items, 100).len(), 10);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<u32> = (0..20).collect();
        Stream::from_seed(9).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn unit_interval() {
        let mut s = Stream::from_seed(11);
        for _ in 0..1000 {
            let x = s.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }
}
