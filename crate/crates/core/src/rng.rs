use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream identifiers so that each consumer of a user seed draws
/// from its own sequence.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const INVERSE: u64 = 2;
    pub const DOWNSAMPLE: u64 = 3;
    pub const SMOTER: u64 = 4;
    pub const INIT: u64 = 5;
    pub const TASKS: u64 = 6;
    pub const BENCH: u64 = 7;
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
