//! Counter-based random streams.
//!
//! Every random draw in the crate is addressed by `(seed, domain, stream,
//! counter)`, so any sample can be regenerated without replaying history.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent purposes that draw from the same run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    GateNoise = 2,
    Shuffle = 3,
    SvData = 4,
    SpoofData = 5,
    Trials = 6,
    Probe = 7,
}

fn mix(seed: u64, domain: Domain) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (domain as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ChaCha stream positioned at the start of `stream`.
pub fn stream_rng(seed: u64, domain: Domain, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, domain));
    rng.set_stream(stream);
    rng
}

/// Uniform draw strictly inside (0, 1) at position `counter` of `stream`.
pub fn counter_uniform(seed: u64, domain: Domain, stream: u64, counter: u64) -> f64 {
    let mut rng = stream_rng(seed, domain, stream);
    // one u64 is two 32-bit words
    rng.set_word_pos(counter as u128 * 2);
    open_unit(rng.next_u64())
}

/// Maps 52 random bits onto the open interval (0, 1).
pub fn open_unit(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) / (1u64 << 52) as f64
}
