//! Seeded RNG stream management.
//!
//! Every source of randomness in a run owns a dedicated ChaCha stream derived
//! from the run seed and a stream id. The coin stream (id 0) is always
//! separate from the compressor streams, so swapping compressors never
//! perturbs the step-type sequence of a run at a fixed seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream id of the step-type coin.
pub const COIN_STREAM: u64 = 0;
/// Stream id of the master (downlink) compressor.
pub const MASTER_STREAM: u64 = 1;

/// Stream id of client `i`'s (uplink) compressor.
pub fn client_stream(i: usize) -> u64 {
    2 + i as u64
}

/// Derives independent, replayable RNG streams from one run seed.
#[derive(Debug, Clone, Copy)]
pub struct StreamFactory {
    seed: u64,
}

impl StreamFactory {
    pub fn new(seed: u64) -> Self {
        StreamFactory { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}

/// Splitmix64-style mixing for deriving per-point seeds in sweeps and
/// multi-seed replications. Deterministic and order-free.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
