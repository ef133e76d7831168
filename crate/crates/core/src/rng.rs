//! Seeded, stream-addressable random numbers.
//!
//! Every random path in the crate draws from a ChaCha8 generator keyed by
//! `(seed, stream)`, so any sample can be regenerated without replaying the
//! draws that preceded it.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `rows x cols` standard normals, filled column by column.
pub fn normal_matrix(seed: u64, stream: u64, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, stream);
    DMatrix::from_iterator(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Child seed for replicate `index`, independent of how many draws any
/// other replicate consumes.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut rng = stream_rng(seed, u64::MAX - index);
    rng.random()
}
