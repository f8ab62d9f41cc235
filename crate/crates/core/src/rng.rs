use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Platform-independent seeded generator used everywhere.
pub type Rng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent seed for item `index` of stream `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut x = splitmix(base ^ 0x5851_f42d_4c95_7f2d);
    x = splitmix(x ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    splitmix(x ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Streams keep training, evaluation and demonstration episodes disjoint.
pub mod stream {
    pub const TRAIN: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const DEMO: u64 = 3;
    pub const AGENT: u64 = 4;
    pub const REPLAY: u64 = 5;
}
