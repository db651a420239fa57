//! Stable seed derivation.
//!
//! Every RNG in the crate is a ChaCha8 stream seeded through these
//! functions, so a consumer can reconstruct any stream from the base seed
//! plus its position (stream tag, index) alone — resuming an experiment at
//! epoch k needs no replay of epochs 0..k. The mixer is a fixed splitmix64
//! finalizer; nothing here depends on `std` hashers, which are free to
//! change between releases.

/// splitmix64 finalizer: a bijective scramble of the input.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a stream tag.
pub fn derive(base: u64, tag: u64) -> u64 {
    mix(base ^ mix(tag))
}

/// Derives an indexed child seed (e.g. per epoch, per image, per cell).
pub fn derive2(base: u64, tag: u64, index: u64) -> u64 {
    derive(derive(base, tag), index)
}

/// Stream tags. Distinct consumers use distinct tags so that, say, drawing
/// one extra init parameter can never shift the data order.
pub mod stream {
    /// Model parameter initialization.
    pub const INIT: u64 = 1;
    /// Per-epoch shuffling and augmentation.
    pub const EPOCH: u64 = 2;
    /// Synthetic dataset class prototypes.
    pub const BLOB_CLASS: u64 = 3;
    /// Synthetic dataset per-image noise.
    pub const BLOB_IMAGE: u64 = 4;
    /// Fixed-statistics perturbation sampling (singularity grid cells).
    pub const GRID: u64 = 5;
    /// Verification suites (gradcheck and friends).
    pub const VERIFY: u64 = 6;
}
