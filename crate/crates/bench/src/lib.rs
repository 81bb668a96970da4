//! Seeded fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rmm_core::memory::{MemoryBank, Query};
use rmm_core::wavelet::WaveletCode;
use rmm_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[c, h, w], 0.0, 1.0, &mut rng(seed))
}

pub fn unit_query(dim: usize, seed: u64) -> Query {
    let t = Tensor::uniform(&[dim], -1.0, 1.0, &mut rng(seed));
    Query::new(t.into_data()).expect("nonzero query")
}

/// A full bank of `capacity` random entries.
pub fn full_bank(capacity: usize, key_dim: usize, code_dim: usize, seed: u64) -> MemoryBank {
    let mut bank = MemoryBank::new(capacity, key_dim, code_dim).expect("valid bank");
    let mut r = rng(seed);
    for slot in 0..capacity {
        let q = unit_query(key_dim, seed ^ (slot as u64 + 1));
        let code = WaveletCode::new(Tensor::uniform(&[code_dim], -1.0, 1.0, &mut r).into_data());
        bank.write(slot, &q, &code, slot as u64);
    }
    bank
}
