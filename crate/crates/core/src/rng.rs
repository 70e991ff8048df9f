//! Counter-based random draws.
//!
//! Every stochastic outcome in a run (fading, link success, relay usage,
//! traffic) is a pure function of the scenario seed and a small tuple of
//! integers naming the event. Two runs that ask the same question get the
//! same answer regardless of evaluation order, which is what makes replay
//! and cross-protocol comparison on common random numbers work.

/// Draw streams. Distinct tags keep otherwise identical keys apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Fading = 1,
    LinkSuccess = 2,
    RelayUse = 3,
    Control = 4,
    TrickleJitter = 5,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64 well-mixed bits for `(seed, stream, key...)`.
pub fn keyed_bits(seed: u64, stream: Stream, key: &[u64]) -> u64 {
    let mut h = mix(seed.wrapping_add(GOLDEN));
    h = mix(h ^ (stream as u64).wrapping_mul(GOLDEN));
    for &k in key {
        h = mix(h.wrapping_add(GOLDEN) ^ k);
    }
    h
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn keyed_uniform(seed: u64, stream: Stream, key: &[u64]) -> f64 {
    (keyed_bits(seed, stream, key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Bernoulli trial: true with probability `p`.
pub fn keyed_bernoulli(seed: u64, stream: Stream, key: &[u64], p: f64) -> bool {
    if p >= 1.0 {
        return true;
    }
    if p <= 0.0 {
        return false;
    }
    keyed_uniform(seed, stream, key) < p
}

/// Exponential draw with mean 1 (inverse CDF).
pub fn keyed_exp1(seed: u64, stream: Stream, key: &[u64]) -> f64 {
    let u = keyed_uniform(seed, stream, key);
    -(1.0 - u).ln()
}

/// Sub-seed derivation for independent per-run generators.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    mix(seed ^ mix(salt.wrapping_add(GOLDEN)))
}
