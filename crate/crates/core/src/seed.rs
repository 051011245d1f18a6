//! Deterministic seed derivation.
//!
//! Every random draw in training is keyed by a tuple such as
//! `(base seed, epoch, sample, port)`, so no generator state has to be
//! carried between epochs or persisted in checkpoints.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(base), |acc, k| splitmix64(acc ^ splitmix64(*k)))
}

// Stream tags, so different consumers of the same (seed, epoch, index)
// never share a generator.
pub(crate) const STREAM_PATCH: u64 = 1;
pub const STREAM_NOISE_PRIMARY: u64 = 2;
pub const STREAM_NOISE_SECONDARY: u64 = 3;
pub(crate) const STREAM_SHUFFLE: u64 = 4;
pub(crate) const STREAM_SPLIT: u64 = 5;
