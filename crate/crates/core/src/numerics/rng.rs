use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Portable, reproducible generator used everywhere randomness is needed.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream seed for `(seed, stream)`, via a splitmix64 mix.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sub_rng(seed: u64, stream: u64) -> Rng {
    seeded_rng(derive_seed(seed, stream))
}
