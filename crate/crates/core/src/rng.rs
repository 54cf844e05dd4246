//! Named random substreams derived from one root seed.
//!
//! Every consumer of randomness asks for its own stream by name (and optionally
//! an index), so adding a new consumer never shifts the draws of another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, name: &str) -> Rng {
    substream_indexed(seed, name, 0)
}

pub fn substream_indexed(seed: u64, name: &str, index: u64) -> Rng {
    let s = splitmix64(splitmix64(seed ^ fnv1a(name.as_bytes())) ^ splitmix64(index));
    ChaCha8Rng::seed_from_u64(s)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
