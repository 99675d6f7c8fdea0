//! Stateless seed mixing used wherever randomness must be a pure function of
//! its coordinates (dropout masks, per-trial and per-epoch seeds).

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit hash of a word sequence.
pub fn mix64(words: &[u64]) -> u64 {
    let mut h = GOLDEN;
    for &w in words {
        h = splitmix(h.wrapping_add(GOLDEN) ^ w);
    }
    h
}

/// Uniform draw in `[0, 1)` keyed by `words`.
pub fn unit_hash(words: &[u64]) -> f64 {
    (mix64(words) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
