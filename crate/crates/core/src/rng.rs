//! Seeded, portable random source (ChaCha8) and the initializers built on it.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream derived from this seed and a label.
    pub fn fork(seed: u64, stream: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        Rng(r)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.random_range(lo..hi)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    /// Normal with the given std, resampled until it lies within two std.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal() * std)
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform(lo, hi))
    }

    pub fn trunc_normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.trunc_normal(std))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::seed(3).normal_tensor(&[8], 1.0);
        let b = Rng::seed(3).normal_tensor(&[8], 1.0);
        assert_eq!(a, b);
        let c = Rng::fork(3, 1).normal_tensor(&[8], 1.0);
        assert_ne!(a, c);
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut r = Rng::seed(0);
        assert!((0..2000).all(|_| r.trunc_normal(0.02).abs() <= 0.04));
    }
}
