//! Seeded random streams. Every consumer draws from its own named substream
//! of the run seed, so changing one purpose never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::numerics::{Scalar, Tensor};

pub fn substream(seed: u64, purpose: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(purpose.as_bytes());
    let mut id = [0u8; 8];
    id.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(id));
    rng
}

/// Normal samples with standard deviation `std`, redrawn outside ±2 std.
pub fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 2.0 * std {
                break T::lit(x);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}
