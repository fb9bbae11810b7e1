use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every seeded draw in the crate goes through this generator so that a
/// given 64-bit seed produces the same stream on every platform.
pub(crate) fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
