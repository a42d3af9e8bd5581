//! Synthetic inputs shared by the benchmarks.

use bailaudit_core::eval::ConfusionMatrix;
use bailaudit_core::retrieval::{IndexEntry, PrecedentIndex};

/// Small deterministic generator so benches need no RNG dependency.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed.wrapping_mul(6364136223846793005).wrapping_add(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.0 >> 11
    }

    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() as f64 / (1u64 << 53) as f64) as f32 * 2.0 - 1.0
    }
}

pub fn random_index(n: usize, dimension: usize, seed: u64) -> PrecedentIndex {
    let mut rng = Lcg::new(seed);
    let entries = (0..n)
        .map(|i| IndexEntry {
            case_id: format!("case-{i:06}"),
            bail_granted: i % 2 == 0,
            text: String::new(),
        })
        .collect();
    let vectors = (0..n * dimension).map(|_| rng.next_f32()).collect();
    PrecedentIndex::from_vectors("synthetic", dimension, entries, vectors).expect("consistent shape")
}

pub fn random_matrices(n: usize, seed: u64) -> Vec<ConfusionMatrix> {
    let mut rng = Lcg::new(seed);
    (0..n)
        .map(|_| {
            ConfusionMatrix::new(
                rng.next_u64() % 5000,
                rng.next_u64() % 5000,
                rng.next_u64() % 5000,
                rng.next_u64() % 5000,
            )
        })
        .collect()
}
