//! Seeded, platform-independent randomness.
//!
//! Everything random in the crate draws from ChaCha8 streams. A stream is
//! identified by a root seed plus a list of counters (epoch, batch, sample),
//! so dropout masks and initializations do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for `(seed, path...)`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut h = splitmix(seed ^ 0x6d69_6b74_7374_0000);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
