//! Seed derivation for independent random streams.
//!
//! Every random component draws from its own ChaCha8 stream whose seed is
//! a hash of the master seed, a component name and integer coordinates
//! (grid cell, iteration, ...). Streams therefore do not depend on the
//! order in which components execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a over the component name and coordinates, finished with splitmix64.
pub fn derive_seed(master: u64, component: &str, coords: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    eat(&master.to_le_bytes());
    eat(component.as_bytes());
    eat(&[0xff]);
    for c in coords {
        eat(&c.to_le_bytes());
    }
    splitmix64(h)
}

pub fn stream(master: u64, component: &str, coords: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, component, coords))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
