//! Seeded random streams.
//!
//! Monte-Carlo work is split into fixed-size chunks of trials; chunk `c` draws
//! from ChaCha stream `c` of the run seed. Output is therefore bit-identical
//! for a fixed `(seed, chunk size)` regardless of thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const DEFAULT_CHUNK: u64 = 4096;

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Splits `total` trials into `(stream index, trials)` chunks.
pub fn chunks(total: u64, chunk: u64) -> Vec<(u64, u64)> {
    let chunk = chunk.max(1);
    let n = total.div_ceil(chunk);
    (0..n)
        .map(|c| (c, chunk.min(total - c * chunk)))
        .collect()
}
