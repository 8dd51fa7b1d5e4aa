//! Named, seed-derived random streams. A run's single seed fans out into
//! independent substreams ("data", "init", "sampling", ...), so changing how
//! much one stream is consumed never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let h = fnv1a(stream.as_bytes(), FNV_OFFSET ^ mix(seed));
    mix(h ^ mix(index.wrapping_add(1)))
}

pub fn substream(seed: u64, stream: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, 0))
}

pub fn indexed_substream(seed: u64, stream: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, index))
}
