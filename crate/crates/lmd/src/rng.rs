//! Seeded randomness helpers. Every sampling path in the crate derives its
//! stream from a `u64` seed so that runs are reproducible bit-for-bit.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::Tensor;

/// Deterministic generator for a seed.
pub fn seeded(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Derive an independent stream seed from a base seed and a stream tag
/// (splitmix64 finalizer over the combined words).
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag)
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal_vec(rng: &mut StdRng, n: usize, mean: f64, std: f64) -> Vec<f64> {
    let dist = Normal::new(mean, std).expect("std must be positive");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn standard_normal_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, 0.0, 1.0)).unwrap()
}

pub fn uniform_vec(rng: &mut StdRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let dist = Uniform::new(lo, hi);
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Uniform sample from the interior of the probability simplex in `d`
/// dimensions (normalized i.i.d. exponentials, i.e. a flat Dirichlet).
pub fn uniform_simplex(rng: &mut StdRng, d: usize) -> Tensor {
    loop {
        let exps: Vec<f64> = (0..d)
            .map(|_| {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                -u.ln()
            })
            .collect();
        let total: f64 = exps.iter().sum();
        let x: Vec<f64> = exps.iter().map(|e| e / total).collect();
        if x.iter().all(|&v| v > 1e-12) {
            return Tensor::vector(x);
        }
    }
}
