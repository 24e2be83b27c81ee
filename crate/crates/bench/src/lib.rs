//! Seeded fixtures shared by the benchmarks.

use fera_core::{ClientSubmission, EmbeddingVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uncertainties in nats for `clients` clients.
pub fn uncertainties(clients: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clients).map(|_| rng.random_range(0.0..3.0)).collect()
}

/// One query's submissions, answers drawn from `options` letters.
pub fn submissions(clients: usize, options: u8, seed: u64) -> Vec<ClientSubmission> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clients)
        .map(|client_id| ClientSubmission {
            client_id,
            query_id: 0,
            steps: vec!["step".to_string()],
            answer: char::from(b'A' + rng.random_range(0..options)).to_string(),
            uncertainty: rng.random_range(0.0..3.0),
        })
        .collect()
}

/// Unit vectors of dimension `dim`.
pub fn unit_vectors(count: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            EmbeddingVector::new(v.into_iter().map(|x| x / norm).collect()).expect("finite vector")
        })
        .collect()
}
