//! Seeded counter-addressable random source.
//!
//! A draw stream is fully identified by `(seed, counter)`, where the counter is
//! the ChaCha8 word position. Restoring the pair restores the stream exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::float::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        let mut rng = RngState::new(seed);
        rng.inner.set_word_pos(counter as u128);
        rng
    }

    pub fn restore(snapshot: RngSnapshot) -> Self {
        RngState::at(snapshot.seed, snapshot.counter)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            counter: self.counter(),
        }
    }

    /// Independent stream keyed by `(seed, tag)`.
    pub fn derive(seed: u64, tag: u64) -> Self {
        RngState::new(splitmix64(seed ^ splitmix64(tag.wrapping_add(0x5eed))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        p > 0.0 && self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// I.i.d. standard normal tensor.
    pub fn gaussian<F: Scalar>(&mut self, dims: &[usize]) -> Tensor<F> {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| F::of(self.standard_normal())).collect();
        Tensor::from_parts(dims.to_vec(), data)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.int_inclusive(0, i);
            items.swap(i, j);
        }
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
