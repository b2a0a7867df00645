use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seeded ChaCha8 generator.
///
/// Sub-streams are independent ChaCha streams of the same seed, selected
/// with [`Rng::substream`]; they let weight initialisation, data generation
/// and shuffling draw from the same seed without coupling their call order.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::substream_of(seed, 0)
    }

    fn substream_of(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh generator on stream `id` of this generator's seed.
    pub fn substream(&self, id: u64) -> Self {
        Self::substream_of(self.seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_differ_and_replay() {
        let root = Rng::new(42);
        let mut s1 = root.substream(1);
        let mut s2 = root.substream(2);
        assert_ne!(s1.next_u64(), s2.next_u64());
        assert_eq!(root.substream(7).next_u64(), Rng::new(42).substream(7).next_u64());
    }
}
