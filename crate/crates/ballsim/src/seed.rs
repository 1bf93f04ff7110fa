//! Seed splitting.
//!
//! Every sequence gets its own seed so splits can be generated in any order
//! (or in parallel) with identical results:
//!
//! `sequence_seed(master, split, index) = splitmix64(master ^ splitmix64((split << 32) | index))`

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sequence_seed(master: u64, split: u32, index: u32) -> u64 {
    splitmix64(master ^ splitmix64((u64::from(split) << 32) | u64::from(index)))
}

/// Derives an independent named stream from a master seed.
pub fn stream_seed(master: u64, tag: &str) -> u64 {
    tag.bytes().fold(splitmix64(master), |acc, b| splitmix64(acc ^ u64::from(b)))
}
