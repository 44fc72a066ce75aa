//! Seed derivation for independent, order-free random streams.
//!
//! Every random stream in the simulator is a `ChaCha8Rng` keyed by a tuple of
//! integers (base seed, round, client id, purpose tag). Streams therefore never
//! depend on the order in which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tags keep streams with identical numeric keys apart.
pub mod tag {
    pub const INIT: u64 = 0x494e_4954;
    pub const IID: u64 = 0x4949_4400;
    pub const DIRICHLET: u64 = 0x4449_5249;
    pub const CLASS_SPLIT: u64 = 0x434c_5350;
    pub const SAMPLE_CLIENTS: u64 = 0x5341_4d50;
    pub const LOCAL_UPDATE: u64 = 0x4c4f_4341;
    pub const PRIVATE_MODEL: u64 = 0x5052_4956;
    pub const TEACHER_CHOICE: u64 = 0x5445_4143;
    pub const CENTRAL: u64 = 0x4345_4e54;
    pub const SYNTHETIC: u64 = 0x5359_4e54;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a key tuple into a single 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> SimRng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}
