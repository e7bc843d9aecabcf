//! Seed derivation for independent RNG streams.
//!
//! Every random decision in a run draws from a ChaCha stream whose seed is a
//! mix of the run seed and a few integer tags (step, prompt id, purpose), so
//! parallel and serial execution see identical streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

// Stream purposes; only need to be distinct.
pub const TAG_ROLLOUT: u64 = 0x524f_4c4c;
pub const TAG_SHARDS: u64 = 0x5348_5244;
pub const TAG_MINIBATCH: u64 = 0x4d42_4154;
pub const TAG_CRITIC_INIT: u64 = 0x4352_4954;
pub const TAG_CRITIC_MB: u64 = 0x434d_4254;
pub const TAG_ACTOR_INIT: u64 = 0x4143_5452;
pub const TAG_PROMPTS: u64 = 0x5052_4d54;
pub const TAG_EVAL: u64 = 0x4556_414c;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into a new seed.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

pub fn rng(base: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}
