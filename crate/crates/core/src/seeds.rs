//! Independent RNG streams derived from a single run seed.

/// SplitMix64 finalizer over `base ⊕ tag`, used to derive uncorrelated seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The per-run streams: weight init, data shuffling and score-batch sampling.
/// Synthetic data has its own seed in the dataset config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    pub init: u64,
    pub shuffle: u64,
    pub score_batches: u64,
}

impl SeedStreams {
    pub fn from_seed(seed: u64) -> Self {
        SeedStreams {
            init: derive_seed(seed, 1),
            shuffle: derive_seed(seed, 2),
            score_batches: derive_seed(seed, 3),
        }
    }
}
