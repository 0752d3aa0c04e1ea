//! Deterministic seed derivation for parallel sampling.
//!
//! All stochastic stages draw from counter-seeded ChaCha streams so results
//! are bit-identical for a given base seed regardless of thread count or
//! scheduling order.

/// SplitMix64 finalizer; bijective on `u64` with strong bit diffusion.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from `base` and a stream label.
pub fn mix(base: u64, label: u64) -> u64 {
    splitmix64(base ^ splitmix64(label))
}

/// Seed for the candidate draw of one patch: `base ^ patch_index`.
///
/// Both denoising passes of a run derive identical per-patch seeds, so the
/// second pass re-scores the same candidate sets against the boosted image
/// instead of rolling fresh ones.
pub fn patch_seed(base: u64, patch_index: usize) -> u64 {
    base ^ patch_index as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_is_deterministic_and_label_sensitive() {
        assert_eq!(mix(42, 7), mix(42, 7));
        assert_ne!(mix(42, 7), mix(42, 8));
        assert_ne!(mix(42, 7), mix(43, 7));
    }

    #[test]
    fn patch_seeds_are_distinct_per_patch() {
        assert_ne!(patch_seed(9, 0), patch_seed(9, 1));
        assert_eq!(patch_seed(9, 5), 9 ^ 5);
    }
}
