//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream addressed by a
//! root seed, a domain tag and a stream index (usually the sample index).
//! Streams are independent of each other and of how work is split across
//! threads, so results never depend on batching or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags separating the uses of one root seed.
pub mod domain {
    pub const DATA: u64 = 0x01;
    pub const SAMPLER: u64 = 0x02;
    pub const KLUB: u64 = 0x03;
    pub const POOL: u64 = 0x04;
    pub const MONITOR: u64 = 0x05;
    pub const TOTAL: u64 = 0x06;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent and a tag. Used to build hierarchies
/// such as (run seed, stage, sweep, index).
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    splitmix64(parent ^ splitmix64(tag.wrapping_add(0x632b_e59b_d9b4_e019)))
}

/// Address of one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub domain: u64,
}

impl StreamKey {
    pub fn new(seed: u64, domain: u64) -> Self {
        Self { seed, domain }
    }

    pub fn child(self, tag: u64) -> Self {
        Self {
            seed: derive_seed(self.seed, tag),
            domain: self.domain,
        }
    }

    /// The generator for stream `index` under this key.
    pub fn stream(self, index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let a = derive_seed(self.seed, self.domain);
        let b = splitmix64(a);
        let c = splitmix64(b);
        let d = splitmix64(c);
        for (chunk, word) in key.chunks_exact_mut(8).zip([a, b, c, d]) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }
}
