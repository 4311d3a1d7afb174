//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`Rng`], a thin wrapper around
//! the ChaCha8 stream cipher (`rand_chacha::ChaCha8Rng`). The 256-bit key is
//! expanded from a 64-bit seed with `SeedableRng::seed_from_u64`, and the
//! cipher's 64-bit stream id selects independent sub-streams:
//!
//! * `Rng::new(seed)` uses stream id 0.
//! * `rng.split(i)` returns a fresh generator with the same key and stream id
//!   `splitmix64(parent_stream ^ splitmix64(i + 1))`. The result depends only
//!   on `(seed, parent stream id, i)`, never on how many values the parent has
//!   already produced.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent sub-stream number `index` of this generator.
    pub fn split(&self, index: u64) -> Rng {
        let stream = splitmix64(self.stream ^ splitmix64(index.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be nonempty");
        self.inner.random_range(0..n)
    }

    /// Draws an index with probability proportional to `weights`.
    ///
    /// Weights must be nonnegative with a positive sum.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        // rounding can leave u marginally above the last bucket
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(rng: &mut Rng, n: usize) -> Vec<u64> {
        (0..n).map(|_| rng.next_u64()).collect()
    }

    #[test]
    fn same_seed_same_stream() {
        assert_eq!(draws(&mut Rng::new(0), 100), draws(&mut Rng::new(0), 100));
    }

    #[test]
    fn different_seeds_differ() {
        assert_ne!(draws(&mut Rng::new(0), 100), draws(&mut Rng::new(1), 100));
    }

    #[test]
    fn split_is_deterministic_and_independent_of_parent_usage() {
        let mut parent = Rng::new(7);
        let a = draws(&mut parent.split(3), 50);
        let _ = draws(&mut parent, 1000);
        let b = draws(&mut parent.split(3), 50);
        assert_eq!(a, b);
        assert_ne!(a, draws(&mut parent.split(4), 50));
        assert_ne!(a, draws(&mut Rng::new(7), 50));
    }

    #[test]
    fn nested_splits_differ() {
        let root = Rng::new(11);
        let a = draws(&mut root.split(1).split(2), 20);
        let b = draws(&mut root.split(2).split(1), 20);
        assert_ne!(a, b);
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let i = rng.categorical(&[0.0, 1.0, 0.0, 2.0]);
            assert!(i == 1 || i == 3);
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(5);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
