//! Benchmark fixtures shared by the criterion targets.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pkus_core::adapter::{LowRankAdapter, ProviderAdapterSet};
use pkus_core::backbone::BackboneConfig;
use pkus_core::linalg::{Matrix, Vector};

pub fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

pub fn rand_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    Vector::from_fn(dim, |_| unit(rng) * 2.0 - 1.0)
}

pub fn rand_adapter(
    rng: &mut ChaCha8Rng,
    d_out: usize,
    rank: usize,
    d_in: usize,
) -> LowRankAdapter {
    let a = Matrix::from_fn(d_out, rank, |_, _| unit(rng) - 0.5);
    let b = Matrix::from_fn(rank, d_in, |_, _| unit(rng) - 0.5);
    LowRankAdapter::new(a, b, 16.0).expect("valid adapter")
}

/// Dense adapter set over `cfg`, every site active.
pub fn dense_set(seed: u64, cfg: &BackboneConfig, rank: usize) -> ProviderAdapterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.hidden_dim;
    let mut set = ProviderAdapterSet::new("bench", "toy-backbone-v1");
    for site in cfg.sites() {
        set.insert(site, rand_adapter(&mut rng, d, rank, d), true);
    }
    set
}
