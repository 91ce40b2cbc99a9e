//! Seed derivation and worker-pool configuration.

use rand::rngs::StdRng;
use rand::SeedableRng;

/// splitmix64: decorrelates derived seeds from sequential inputs.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for an independent random stream.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_add(1)) ^ splitmix64(index.wrapping_mul(0x9e37)))
}

pub fn rng_from(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Caps the global worker pool from `PUNET_THREADS` when set.
///
/// Safe to call more than once; only the first call takes effect.
pub fn configure_threads_from_env() {
    if let Ok(v) = std::env::var("PUNET_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
